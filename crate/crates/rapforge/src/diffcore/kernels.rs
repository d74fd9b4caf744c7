//! Pure array kernels shared by the graph ops.
//!
//! Every kernel takes raw row-major slices plus explicit dimensions. Forward
//! kernels write into zero-initialized buffers; backward kernels accumulate
//! (`+=`) into their gradient buffers so the tape can sum contributions from
//! multiple uses of a node. All loops run in a fixed order, so results are
//! bit-reproducible.

/// Valid output range for `o*stride + k_off - pad` to land in `[0, in_len)`.
#[inline]
fn conv_range(out_len: usize, in_len: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    let max_num = in_len + pad;
    if max_num <= k_off + 1 {
        return (0, 0);
    }
    let hi = ((max_num - k_off - 1) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Spatial output size of a convolution, `floor((len + 2p - k)/s) + 1`.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Spatial output size of a transposed convolution, `(len-1)*s - 2p + k`.
pub fn conv_transpose_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len - 1) * stride + k - 2 * pad
}

/// `c = a @ b` for `a: (m,k)`, `b: (k,n)`. `c` must be zeroed.
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
}

/// Dimensions of a 2d convolution.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dDims {
    pub fn out_h(&self) -> usize {
        conv_out_len(self.h, self.kh, self.stride, self.pad)
    }
    pub fn out_w(&self) -> usize {
        conv_out_len(self.w, self.kw, self.stride, self.pad)
    }
}

/// Convolution forward. `x: (B,Cin,H,W)`, `weight: (Cout,Cin,KH,KW)`,
/// optional `bias: (Cout)`. `out` must be zeroed, `(B,Cout,OH,OW)`.
pub fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, out: &mut [f64], d: &Conv2dDims) {
    let (oh_len, ow_len) = (d.out_h(), d.out_w());
    let (s, p) = (d.stride, d.pad);
    for b in 0..d.batch {
        for oc in 0..d.c_out {
            let out_base = (b * d.c_out + oc) * oh_len * ow_len;
            if let Some(bias) = bias {
                let bv = bias[oc];
                for v in &mut out[out_base..out_base + oh_len * ow_len] {
                    *v += bv;
                }
            }
            for ic in 0..d.c_in {
                let x_base = (b * d.c_in + ic) * d.h * d.w;
                for kh in 0..d.kh {
                    let (oh_lo, oh_hi) = conv_range(oh_len, d.h, kh, s, p);
                    for kw in 0..d.kw {
                        let wv = weight[((oc * d.c_in + ic) * d.kh + kh) * d.kw + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = conv_range(ow_len, d.w, kw, s, p);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - p;
                            let x_row = &x[x_base + ih * d.w..x_base + (ih + 1) * d.w];
                            let o_row = &mut out[out_base + oh * ow_len..out_base + (oh + 1) * ow_len];
                            for ow in ow_lo..ow_hi {
                                o_row[ow] += wv * x_row[ow * s + kw - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution input gradient: `dx += conv2d_adjoint(g, weight)`.
pub fn conv2d_grad_input(g: &[f64], weight: &[f64], dx: &mut [f64], d: &Conv2dDims) {
    let (oh_len, ow_len) = (d.out_h(), d.out_w());
    let (s, p) = (d.stride, d.pad);
    for b in 0..d.batch {
        for oc in 0..d.c_out {
            let g_base = (b * d.c_out + oc) * oh_len * ow_len;
            for ic in 0..d.c_in {
                let x_base = (b * d.c_in + ic) * d.h * d.w;
                for kh in 0..d.kh {
                    let (oh_lo, oh_hi) = conv_range(oh_len, d.h, kh, s, p);
                    for kw in 0..d.kw {
                        let wv = weight[((oc * d.c_in + ic) * d.kh + kh) * d.kw + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = conv_range(ow_len, d.w, kw, s, p);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - p;
                            let g_row = &g[g_base + oh * ow_len..g_base + (oh + 1) * ow_len];
                            let dx_row = &mut dx[x_base + ih * d.w..x_base + (ih + 1) * d.w];
                            for ow in ow_lo..ow_hi {
                                dx_row[ow * s + kw - p] += wv * g_row[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution weight gradient: `dw += x (*) g`.
pub fn conv2d_grad_weight(x: &[f64], g: &[f64], dw: &mut [f64], d: &Conv2dDims) {
    let (oh_len, ow_len) = (d.out_h(), d.out_w());
    let (s, p) = (d.stride, d.pad);
    for oc in 0..d.c_out {
        for ic in 0..d.c_in {
            for kh in 0..d.kh {
                let (oh_lo, oh_hi) = conv_range(oh_len, d.h, kh, s, p);
                for kw in 0..d.kw {
                    let (ow_lo, ow_hi) = conv_range(ow_len, d.w, kw, s, p);
                    let mut acc = 0.0;
                    for b in 0..d.batch {
                        let x_base = (b * d.c_in + ic) * d.h * d.w;
                        let g_base = (b * d.c_out + oc) * oh_len * ow_len;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - p;
                            let x_row = &x[x_base + ih * d.w..x_base + (ih + 1) * d.w];
                            let g_row = &g[g_base + oh * ow_len..g_base + (oh + 1) * ow_len];
                            for ow in ow_lo..ow_hi {
                                acc += x_row[ow * s + kw - p] * g_row[ow];
                            }
                        }
                    }
                    dw[((oc * d.c_in + ic) * d.kh + kh) * d.kw + kw] += acc;
                }
            }
        }
    }
}

/// Per-output-channel sum of the upstream gradient: `db[oc] += sum(g[:,oc,:,:])`.
pub fn grad_bias_channels(g: &[f64], db: &mut [f64], batch: usize, c_out: usize, spatial: usize) {
    for b in 0..batch {
        for oc in 0..c_out {
            let base = (b * c_out + oc) * spatial;
            let mut acc = 0.0;
            for &v in &g[base..base + spatial] {
                acc += v;
            }
            db[oc] += acc;
        }
    }
}

/// Transposed convolution forward (scatter form). `x: (B,Cin,H,W)`,
/// `weight: (Cin,Cout,KH,KW)`, optional `bias: (Cout)`.
/// `out` must be zeroed, `(B,Cout,OH,OW)` with `OH = (H-1)*s + KH - 2p`.
pub fn conv_transpose2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
    d: &Conv2dDims,
) {
    let oh_len = conv_transpose_out_len(d.h, d.kh, d.stride, d.pad);
    let ow_len = conv_transpose_out_len(d.w, d.kw, d.stride, d.pad);
    let (s, p) = (d.stride, d.pad);
    for b in 0..d.batch {
        for ic in 0..d.c_in {
            let x_base = (b * d.c_in + ic) * d.h * d.w;
            for oc in 0..d.c_out {
                let out_base = (b * d.c_out + oc) * oh_len * ow_len;
                for kh in 0..d.kh {
                    let (ih_lo, ih_hi) = conv_range(d.h, oh_len, kh, s, p);
                    for kw in 0..d.kw {
                        let wv = weight[((ic * d.c_out + oc) * d.kh + kh) * d.kw + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (iw_lo, iw_hi) = conv_range(d.w, ow_len, kw, s, p);
                        for ih in ih_lo..ih_hi {
                            let oh = ih * s + kh - p;
                            let x_row = &x[x_base + ih * d.w..x_base + (ih + 1) * d.w];
                            let o_row = &mut out[out_base + oh * ow_len..out_base + (oh + 1) * ow_len];
                            for iw in iw_lo..iw_hi {
                                o_row[iw * s + kw - p] += wv * x_row[iw];
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..d.batch {
            for oc in 0..d.c_out {
                let out_base = (b * d.c_out + oc) * oh_len * ow_len;
                let bv = bias[oc];
                for v in &mut out[out_base..out_base + oh_len * ow_len] {
                    *v += bv;
                }
            }
        }
    }
}

/// Transposed convolution input gradient (gather form).
pub fn conv_transpose2d_grad_input(g: &[f64], weight: &[f64], dx: &mut [f64], d: &Conv2dDims) {
    let oh_len = conv_transpose_out_len(d.h, d.kh, d.stride, d.pad);
    let ow_len = conv_transpose_out_len(d.w, d.kw, d.stride, d.pad);
    let (s, p) = (d.stride, d.pad);
    for b in 0..d.batch {
        for ic in 0..d.c_in {
            let x_base = (b * d.c_in + ic) * d.h * d.w;
            for oc in 0..d.c_out {
                let g_base = (b * d.c_out + oc) * oh_len * ow_len;
                for kh in 0..d.kh {
                    let (ih_lo, ih_hi) = conv_range(d.h, oh_len, kh, s, p);
                    for kw in 0..d.kw {
                        let wv = weight[((ic * d.c_out + oc) * d.kh + kh) * d.kw + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (iw_lo, iw_hi) = conv_range(d.w, ow_len, kw, s, p);
                        for ih in ih_lo..ih_hi {
                            let oh = ih * s + kh - p;
                            let g_row = &g[g_base + oh * ow_len..g_base + (oh + 1) * ow_len];
                            let dx_row = &mut dx[x_base + ih * d.w..x_base + (ih + 1) * d.w];
                            for iw in iw_lo..iw_hi {
                                dx_row[iw] += wv * g_row[iw * s + kw - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution weight gradient.
pub fn conv_transpose2d_grad_weight(x: &[f64], g: &[f64], dw: &mut [f64], d: &Conv2dDims) {
    let oh_len = conv_transpose_out_len(d.h, d.kh, d.stride, d.pad);
    let ow_len = conv_transpose_out_len(d.w, d.kw, d.stride, d.pad);
    let (s, p) = (d.stride, d.pad);
    for ic in 0..d.c_in {
        for oc in 0..d.c_out {
            for kh in 0..d.kh {
                let (ih_lo, ih_hi) = conv_range(d.h, oh_len, kh, s, p);
                for kw in 0..d.kw {
                    let (iw_lo, iw_hi) = conv_range(d.w, ow_len, kw, s, p);
                    let mut acc = 0.0;
                    for b in 0..d.batch {
                        let x_base = (b * d.c_in + ic) * d.h * d.w;
                        let g_base = (b * d.c_out + oc) * oh_len * ow_len;
                        for ih in ih_lo..ih_hi {
                            let oh = ih * s + kh - p;
                            let x_row = &x[x_base + ih * d.w..x_base + (ih + 1) * d.w];
                            let g_row = &g[g_base + oh * ow_len..g_base + (oh + 1) * ow_len];
                            for iw in iw_lo..iw_hi {
                                acc += x_row[iw] * g_row[iw * s + kw - p];
                            }
                        }
                    }
                    dw[((ic * d.c_out + oc) * d.kh + kh) * d.kw + kw] += acc;
                }
            }
        }
    }
}

/// Depthwise "valid" convolution with one shared 2d kernel, stride 1.
/// `x: (B,C,H,W)`, `kernel: (KH,KW)`, `out` zeroed `(B,C,H-KH+1,W-KW+1)`.
pub fn depthwise_conv2d_forward(
    x: &[f64],
    kernel: &[f64],
    out: &mut [f64],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) {
    let oh_len = h - kh + 1;
    let ow_len = w - kw + 1;
    for c in 0..channels {
        let x_base = c * h * w;
        let o_base = c * oh_len * ow_len;
        for (ki, &kv) in kernel.iter().enumerate() {
            if kv == 0.0 {
                continue;
            }
            let (dh, dw_off) = (ki / kw, ki % kw);
            for oh in 0..oh_len {
                let x_row = &x[x_base + (oh + dh) * w..x_base + (oh + dh + 1) * w];
                let o_row = &mut out[o_base + oh * ow_len..o_base + (oh + 1) * ow_len];
                for ow in 0..ow_len {
                    o_row[ow] += kv * x_row[ow + dw_off];
                }
            }
        }
    }
}

/// Input gradient of [`depthwise_conv2d_forward`].
pub fn depthwise_conv2d_grad_input(
    g: &[f64],
    kernel: &[f64],
    dx: &mut [f64],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) {
    let oh_len = h - kh + 1;
    let ow_len = w - kw + 1;
    for c in 0..channels {
        let x_base = c * h * w;
        let g_base = c * oh_len * ow_len;
        for (ki, &kv) in kernel.iter().enumerate() {
            if kv == 0.0 {
                continue;
            }
            let (dh, dw_off) = (ki / kw, ki % kw);
            for oh in 0..oh_len {
                let g_row = &g[g_base + oh * ow_len..g_base + (oh + 1) * ow_len];
                let dx_row = &mut dx[x_base + (oh + dh) * w..x_base + (oh + dh + 1) * w];
                for ow in 0..ow_len {
                    dx_row[ow + dw_off] += kv * g_row[ow];
                }
            }
        }
    }
}

/// Kernel gradient of [`depthwise_conv2d_forward`].
pub fn depthwise_conv2d_grad_kernel(
    x: &[f64],
    g: &[f64],
    dk: &mut [f64],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) {
    let oh_len = h - kh + 1;
    let ow_len = w - kw + 1;
    for dh in 0..kh {
        for dw_off in 0..kw {
            let mut acc = 0.0;
            for c in 0..channels {
                let x_base = c * h * w;
                let g_base = c * oh_len * ow_len;
                for oh in 0..oh_len {
                    let x_row = &x[x_base + (oh + dh) * w..x_base + (oh + dh + 1) * w];
                    let g_row = &g[g_base + oh * ow_len..g_base + (oh + 1) * ow_len];
                    for ow in 0..ow_len {
                        acc += x_row[ow + dw_off] * g_row[ow];
                    }
                }
            }
            dk[dh * kw + dw_off] += acc;
        }
    }
}

/// Mirror index for reflect padding without edge repetition.
/// Requires `pad <= len - 1`.
#[inline]
fn reflect_index(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut j = i;
    if j < 0 {
        j = -j;
    }
    if j >= len {
        j = 2 * len - 2 - j;
    }
    j as usize
}

/// Reflect-pad the two trailing spatial axes by `pad` on every side.
/// `x: (planes, H, W)` flattened, `out` any contents, `(planes, H+2p, W+2p)`.
pub fn reflect_pad2d_forward(x: &[f64], out: &mut [f64], planes: usize, h: usize, w: usize, pad: usize) {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    for pl in 0..planes {
        let x_base = pl * h * w;
        let o_base = pl * ph * pw;
        for oh in 0..ph {
            let ih = reflect_index(oh as isize - pad as isize, h);
            let x_row = &x[x_base + ih * w..x_base + (ih + 1) * w];
            let o_row = &mut out[o_base + oh * pw..o_base + (oh + 1) * pw];
            for (ow, slot) in o_row.iter_mut().enumerate() {
                let iw = reflect_index(ow as isize - pad as isize, w);
                *slot = x_row[iw];
            }
        }
    }
}

/// Adjoint of reflect padding: scatter-add the padded gradient back.
pub fn reflect_pad2d_grad_input(g: &[f64], dx: &mut [f64], planes: usize, h: usize, w: usize, pad: usize) {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    for pl in 0..planes {
        let x_base = pl * h * w;
        let g_base = pl * ph * pw;
        for oh in 0..ph {
            let ih = reflect_index(oh as isize - pad as isize, h);
            let g_row = &g[g_base + oh * pw..g_base + (oh + 1) * pw];
            for (ow, &gv) in g_row.iter().enumerate() {
                let iw = reflect_index(ow as isize - pad as isize, w);
                dx[x_base + ih * w + iw] += gv;
            }
        }
    }
}

/// Non-overlapping max pooling (stride = window). Truncates ragged edges.
pub fn maxpool2d_forward(x: &[f64], out: &mut [f64], planes: usize, h: usize, w: usize, size: usize) {
    let (oh_len, ow_len) = (h / size, w / size);
    for pl in 0..planes {
        let x_base = pl * h * w;
        let o_base = pl * oh_len * ow_len;
        for oh in 0..oh_len {
            for ow in 0..ow_len {
                let mut best = f64::NEG_INFINITY;
                for dh in 0..size {
                    let row = x_base + (oh * size + dh) * w + ow * size;
                    for dw in 0..size {
                        let v = x[row + dw];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[o_base + oh * ow_len + ow] = best;
            }
        }
    }
}

/// Max pooling gradient; ties route to the first window element in scan order.
pub fn maxpool2d_grad_input(
    x: &[f64],
    g: &[f64],
    dx: &mut [f64],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) {
    let (oh_len, ow_len) = (h / size, w / size);
    for pl in 0..planes {
        let x_base = pl * h * w;
        let g_base = pl * oh_len * ow_len;
        for oh in 0..oh_len {
            for ow in 0..ow_len {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dh in 0..size {
                    let row = x_base + (oh * size + dh) * w + ow * size;
                    for dw in 0..size {
                        let v = x[row + dw];
                        if v > best {
                            best = v;
                            best_idx = row + dw;
                        }
                    }
                }
                dx[best_idx] += g[g_base + oh * ow_len + ow];
            }
        }
    }
}

/// Instance normalization: each `(sample, channel)` plane of HW values is
/// normalized to zero mean / unit variance (biased variance, plus `eps`).
pub fn instance_norm2d_forward(x: &[f64], out: &mut [f64], planes: usize, spatial: usize, eps: f64) {
    for pl in 0..planes {
        let xs = &x[pl * spatial..(pl + 1) * spatial];
        let n = spatial as f64;
        let mu = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        let os = &mut out[pl * spatial..(pl + 1) * spatial];
        for (o, &v) in os.iter_mut().zip(xs.iter()) {
            *o = (v - mu) * inv;
        }
    }
}

/// Instance norm input gradient. `y` is the forward output.
pub fn instance_norm2d_grad_input(
    x: &[f64],
    y: &[f64],
    g: &[f64],
    dx: &mut [f64],
    planes: usize,
    spatial: usize,
    eps: f64,
) {
    for pl in 0..planes {
        let xs = &x[pl * spatial..(pl + 1) * spatial];
        let ys = &y[pl * spatial..(pl + 1) * spatial];
        let gs = &g[pl * spatial..(pl + 1) * spatial];
        let n = spatial as f64;
        let mu = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        let g_mean = gs.iter().sum::<f64>() / n;
        let gy_mean = gs.iter().zip(ys.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
        let ds = &mut dx[pl * spatial..(pl + 1) * spatial];
        for i in 0..spatial {
            ds[i] += inv * (gs[i] - g_mean - ys[i] * gy_mean);
        }
    }
}

/// Row-wise numerically stable softmax of a `(rows, cols)` matrix.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (slot, &v) in o.iter_mut().zip(row.iter()) {
            let e = (v - max).exp();
            *slot = e;
            sum += e;
        }
        for slot in o.iter_mut() {
            *slot /= sum;
        }
    }
    out
}

/// Row-wise `log(sum(exp(row)))`, stable.
pub fn logsumexp_row(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

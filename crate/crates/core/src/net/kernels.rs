//! Per-sample numeric kernels for the weighted and pooling layers.
//!
//! All buffers are flat row-major slices of a single sample (no batch axis).
//! The `*_transpose` kernels accumulate into their output buffer.

/// Spatial geometry of a 2-D sliding-window layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels_in: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(
        channels_in: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Window> {
        let ph = height + 2 * padding;
        let pw = width + 2 * padding;
        if stride == 0 || kernel_h == 0 || kernel_w == 0 || kernel_h > ph || kernel_w > pw {
            return None;
        }
        Some(Window {
            channels_in,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (ph - kernel_h) / stride + 1,
            out_w: (pw - kernel_w) / stride + 1,
        })
    }

    /// Output positions `o` along one axis whose input `o*stride + k - padding` is in bounds.
    fn valid(&self, k: usize, n_in: usize, n_out: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        let p = self.padding;
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        if n_in + p <= k {
            return 0..0;
        }
        let hi = ((n_in - 1 + p - k) / s + 1).min(n_out);
        lo.min(hi)..hi
    }

    pub fn rows(&self, ky: usize) -> std::ops::Range<usize> {
        self.valid(ky, self.height, self.out_h)
    }

    pub fn cols(&self, kx: usize) -> std::ops::Range<usize> {
        self.valid(kx, self.width, self.out_w)
    }

    pub fn in_plane(&self) -> usize {
        self.height * self.width
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Flat in-plane indices covered by output position `(oy, ox)`; padding is skipped.
    pub fn taps(&self, oy: usize, ox: usize) -> impl Iterator<Item = usize> + '_ {
        let y0 = (oy * self.stride) as isize - self.padding as isize;
        let x0 = (ox * self.stride) as isize - self.padding as isize;
        (0..self.kernel_h).flat_map(move |ky| {
            (0..self.kernel_w).filter_map(move |kx| {
                let y = y0 + ky as isize;
                let x = x0 + kx as isize;
                if y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width {
                    Some(y as usize * self.width + x as usize)
                } else {
                    None
                }
            })
        })
    }
}

/// `out[oc] = bias[oc] + sum_ic conv(input[ic], weight[oc, ic])`.
pub(crate) fn conv2d(
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &Window,
    out_channels: usize,
    out: &mut [f64],
) {
    let plane_out = g.out_plane();
    let k_area = g.kernel_h * g.kernel_w;
    for oc in 0..out_channels {
        let dst = &mut out[oc * plane_out..(oc + 1) * plane_out];
        dst.fill(bias.map_or(0.0, |b| b[oc]));
        for ic in 0..g.channels_in {
            let src = &input[ic * g.in_plane()..(ic + 1) * g.in_plane()];
            let w_base = (oc * g.channels_in + ic) * k_area;
            for ky in 0..g.kernel_h {
                let rows = g.rows(ky);
                for kx in 0..g.kernel_w {
                    let w = weight[w_base + ky * g.kernel_w + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let cols = g.cols(kx);
                    if cols.is_empty() {
                        continue;
                    }
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.padding;
                        let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        let srow = &src[iy * g.width..(iy + 1) * g.width];
                        let ix0 = cols.start * g.stride + kx - g.padding;
                        if g.stride == 1 {
                            let n = cols.len();
                            for (d, s) in drow[cols.start..cols.end]
                                .iter_mut()
                                .zip(&srow[ix0..ix0 + n])
                            {
                                *d += w * s;
                            }
                        } else {
                            for (j, ox) in cols.clone().enumerate() {
                                drow[ox] += w * srow[ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv2d`] without bias: `grad_in += W^T grad_out`.
pub(crate) fn conv2d_transpose(
    grad_out: &[f64],
    weight: &[f64],
    g: &Window,
    out_channels: usize,
    grad_in: &mut [f64],
) {
    let plane_out = g.out_plane();
    let k_area = g.kernel_h * g.kernel_w;
    for oc in 0..out_channels {
        let src = &grad_out[oc * plane_out..(oc + 1) * plane_out];
        for ic in 0..g.channels_in {
            let dst = &mut grad_in[ic * g.in_plane()..(ic + 1) * g.in_plane()];
            let w_base = (oc * g.channels_in + ic) * k_area;
            for ky in 0..g.kernel_h {
                let rows = g.rows(ky);
                for kx in 0..g.kernel_w {
                    let w = weight[w_base + ky * g.kernel_w + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let cols = g.cols(kx);
                    if cols.is_empty() {
                        continue;
                    }
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.padding;
                        let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                        let drow = &mut dst[iy * g.width..(iy + 1) * g.width];
                        let ix0 = cols.start * g.stride + kx - g.padding;
                        if g.stride == 1 {
                            let n = cols.len();
                            for (d, s) in drow[ix0..ix0 + n]
                                .iter_mut()
                                .zip(&srow[cols.start..cols.end])
                            {
                                *d += w * s;
                            }
                        } else {
                            for (j, ox) in cols.clone().enumerate() {
                                drow[ix0 + j * g.stride] += w * srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `grad_w[oc, ic, ky, kx] += sum_{oy, ox} grad_out[oc, oy, ox] * input[ic, iy, ix]`.
#[cfg(test)]
pub(crate) fn conv2d_weight_grad(
    grad_out: &[f64],
    input: &[f64],
    g: &Window,
    out_channels: usize,
    grad_w: &mut [f64],
) {
    let plane_out = g.out_plane();
    let k_area = g.kernel_h * g.kernel_w;
    for oc in 0..out_channels {
        let gsrc = &grad_out[oc * plane_out..(oc + 1) * plane_out];
        for ic in 0..g.channels_in {
            let src = &input[ic * g.in_plane()..(ic + 1) * g.in_plane()];
            let w_base = (oc * g.channels_in + ic) * k_area;
            for ky in 0..g.kernel_h {
                let rows = g.rows(ky);
                for kx in 0..g.kernel_w {
                    let cols = g.cols(kx);
                    let mut acc = 0.0;
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.padding;
                        let grow = &gsrc[oy * g.out_w..(oy + 1) * g.out_w];
                        let srow = &src[iy * g.width..(iy + 1) * g.width];
                        for (j, ox) in cols.clone().enumerate() {
                            acc += grow[ox] * srow[cols.start * g.stride + kx - g.padding + j * g.stride];
                        }
                    }
                    grad_w[w_base + ky * g.kernel_w + kx] += acc;
                }
            }
        }
    }
}

/// `out = W x + b` with `W` of shape `[out, in]`.
pub(crate) fn linear(x: &[f64], weight: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let n_in = x.len();
    for (j, o) in out.iter_mut().enumerate() {
        let row = &weight[j * n_in..(j + 1) * n_in];
        let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
        *o = dot + bias.map_or(0.0, |b| b[j]);
    }
}

/// `grad_in += W^T grad_out`.
pub(crate) fn linear_transpose(grad_out: &[f64], weight: &[f64], grad_in: &mut [f64]) {
    let n_in = grad_in.len();
    for (j, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &weight[j * n_in..(j + 1) * n_in];
        for (d, w) in grad_in.iter_mut().zip(row) {
            *d += g * w;
        }
    }
}

pub(crate) fn linear_weight_grad(grad_out: &[f64], x: &[f64], grad_w: &mut [f64]) {
    let n_in = x.len();
    for (j, &g) in grad_out.iter().enumerate() {
        let row = &mut grad_w[j * n_in..(j + 1) * n_in];
        for (d, v) in row.iter_mut().zip(x) {
            *d += g * v;
        }
    }
}

/// Flat in-plane index of the maximum in each window (lowest index on ties),
/// laid out like the pooled output.
pub(crate) fn maxpool_winners(input: &[f64], g: &Window) -> Vec<usize> {
    let mut winners = Vec::with_capacity(g.channels_in * g.out_plane());
    for c in 0..g.channels_in {
        let plane = &input[c * g.in_plane()..(c + 1) * g.in_plane()];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                if g.padding == 0 {
                    // Every tap is in bounds; same visiting order as `taps`.
                    let (y0, x0) = (oy * g.stride, ox * g.stride);
                    let mut best = y0 * g.width + x0;
                    for ky in 0..g.kernel_h {
                        let row = (y0 + ky) * g.width;
                        for i in row + x0..row + x0 + g.kernel_w {
                            if plane[i] > plane[best] {
                                best = i;
                            }
                        }
                    }
                    winners.push(c * g.in_plane() + best);
                    continue;
                }
                let mut best: Option<usize> = None;
                for i in g.taps(oy, ox) {
                    if best.is_none_or(|b| plane[i] > plane[b]) {
                        best = Some(i);
                    }
                }
                winners.push(c * g.in_plane() + best.expect("window covers at least one input"));
            }
        }
    }
    winners
}

pub(crate) fn avgpool(input: &[f64], g: &Window, out: &mut [f64]) {
    let area = (g.kernel_h * g.kernel_w) as f64;
    for c in 0..g.channels_in {
        let plane = &input[c * g.in_plane()..(c + 1) * g.in_plane()];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let s: f64 = g.taps(oy, ox).map(|i| plane[i]).sum();
                out[c * g.out_plane() + oy * g.out_w + ox] = s / area;
            }
        }
    }
}

pub(crate) fn avgpool_transpose(grad_out: &[f64], g: &Window, grad_in: &mut [f64]) {
    let area = (g.kernel_h * g.kernel_w) as f64;
    for c in 0..g.channels_in {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let v = grad_out[c * g.out_plane() + oy * g.out_w + ox] / area;
                for i in g.taps(oy, ox) {
                    grad_in[c * g.in_plane() + i] += v;
                }
            }
        }
    }
}

/// Column matrix of one sample: row `(ic, ky, kx)` holds the input value under
/// that tap for every output position (zero in the padding).
/// Layout `[C_in * k_h * k_w, out_plane]`; `col` is fully overwritten.
fn im2col(input: &[f64], g: &Window, col: &mut [f64]) {
    let n = g.out_plane();
    col.fill(0.0);
    for ic in 0..g.channels_in {
        let src = &input[ic * g.in_plane()..(ic + 1) * g.in_plane()];
        for ky in 0..g.kernel_h {
            let rows = g.rows(ky);
            for kx in 0..g.kernel_w {
                let cols = g.cols(kx);
                let r = (ic * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut col[r * n..(r + 1) * n];
                for oy in rows.clone() {
                    let iy = oy * g.stride + ky - g.padding;
                    let srow = &src[iy * g.width..(iy + 1) * g.width];
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let ix0 = cols.start + kx - g.padding;
                        drow[cols.clone()].copy_from_slice(&srow[ix0..ix0 + cols.len()]);
                    } else {
                        for ox in cols.clone() {
                            drow[ox] = srow[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input, accumulating.
fn col2im(col: &[f64], g: &Window, grad_in: &mut [f64]) {
    let n = g.out_plane();
    for ic in 0..g.channels_in {
        let dst = &mut grad_in[ic * g.in_plane()..(ic + 1) * g.in_plane()];
        for ky in 0..g.kernel_h {
            let rows = g.rows(ky);
            for kx in 0..g.kernel_w {
                let cols = g.cols(kx);
                let r = (ic * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &col[r * n..(r + 1) * n];
                for oy in rows.clone() {
                    let iy = oy * g.stride + ky - g.padding;
                    let drow = &mut dst[iy * g.width..(iy + 1) * g.width];
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in cols.clone() {
                        drow[ox * g.stride + kx - g.padding] += srow[ox];
                    }
                }
            }
        }
    }
}

/// `c[i, :] += sum_k a[i, k] * b[k, :]` with `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, n: usize) {
    for (crow, arow) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with four interleaved partial sums.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// [`conv2d`] over a `[batch, ..]` buffer via per-sample column matrices.
pub(crate) fn conv2d_batch(
    input: &[f64],
    batch: usize,
    weight: &[f64],
    bias: &[f64],
    g: &Window,
    out_channels: usize,
) -> Vec<f64> {
    let n = g.out_plane();
    let r = g.channels_in * g.kernel_h * g.kernel_w;
    let n_in = g.channels_in * g.in_plane();
    let n_out = out_channels * n;
    let mut col = vec![0.0; r * n];
    let mut y = vec![0.0; batch * n_out];
    for b in 0..batch {
        im2col(&input[b * n_in..(b + 1) * n_in], g, &mut col);
        let yb = &mut y[b * n_out..(b + 1) * n_out];
        for (oc, row) in yb.chunks_exact_mut(n).enumerate() {
            row.fill(bias[oc]);
        }
        gemm_acc(weight, &col, yb, r, n);
    }
    y
}

/// Batched conv backward: accumulates weight and bias gradients and, when
/// `grad_in` is given, the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_batch_backward(
    grad_out: &[f64],
    input: &[f64],
    batch: usize,
    weight: &[f64],
    g: &Window,
    out_channels: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
) {
    let n = g.out_plane();
    let r = g.channels_in * g.kernel_h * g.kernel_w;
    let n_in = g.channels_in * g.in_plane();
    let n_out = out_channels * n;
    let mut col = vec![0.0; r * n];
    let mut gcol = vec![0.0; r * n];
    let mut wt = vec![0.0; r * out_channels];
    for oc in 0..out_channels {
        for k in 0..r {
            wt[k * out_channels + oc] = weight[oc * r + k];
        }
    }
    for b in 0..batch {
        let gob = &grad_out[b * n_out..(b + 1) * n_out];
        im2col(&input[b * n_in..(b + 1) * n_in], g, &mut col);
        for (oc, grow) in gob.chunks_exact(n).enumerate() {
            grad_b[oc] += grow.iter().sum::<f64>();
            let gw = &mut grad_w[oc * r..(oc + 1) * r];
            for (k, d) in gw.iter_mut().enumerate() {
                *d += dot4(grow, &col[k * n..(k + 1) * n]);
            }
        }
        if let Some(gin) = grad_in.as_deref_mut() {
            gcol.fill(0.0);
            gemm_acc(&wt, gob, &mut gcol, out_channels, n);
            col2im(&gcol, g, &mut gin[b * n_in..(b + 1) * n_in]);
        }
    }
}

//! Slice-level numeric kernels shared by forward evaluation and adjoints.

/// A row-major matrix view, optionally read transposed.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    /// Stored row count.
    pub rows: usize,
    /// Stored column count.
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = beta * c + a · b` where `c` is row-major `[m, n]`.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimensions differ");
    assert_eq!(c.len(), m * n, "gemm output length");
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the strides and extents above describe exactly the buffers
    // passed in, whose lengths are checked against rows * cols.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Volume {
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Volume {
    pub fn from_shape(shape: &[usize]) -> Option<Self> {
        match *shape {
            [c, d, h, w] => Some(Self {
                channels: c,
                depth: d,
                height: h,
                width: w,
            }),
            _ => None,
        }
    }

    pub fn voxels(&self) -> usize {
        self.depth * self.height * self.width
    }
}

/// Unfolds `[cin, D, H, W]` into `[cin * k³, D*H*W]` for a stride-1 "same"
/// convolution with cubic kernel side `k` (odd).
pub(crate) fn im2col(input: &[f64], vol: Volume, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let (d, h, w) = (vol.depth as isize, vol.height as isize, vol.width as isize);
    let v = vol.voxels();
    let mut row = 0;
    for ci in 0..vol.channels {
        let src = &input[ci * v..(ci + 1) * v];
        for kz in 0..k as isize {
            for ky in 0..k as isize {
                for kx in 0..k as isize {
                    let dst = &mut cols[row * v..(row + 1) * v];
                    let ox = kx - pad;
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = (w - ox).min(w).max(0) as usize;
                    for z in 0..d {
                        let sz = z + kz - pad;
                        for y in 0..h {
                            let sy = y + ky - pad;
                            let drow = &mut dst[((z * h + y) * w) as usize..((z * h + y + 1) * w) as usize];
                            if sz < 0 || sz >= d || sy < 0 || sy >= h || x_lo >= x_hi {
                                drow.fill(0.0);
                                continue;
                            }
                            let base = ((sz * h + sy) * w) as usize;
                            drow[..x_lo].fill(0.0);
                            drow[x_hi..].fill(0.0);
                            let s0 = (base as isize + x_lo as isize + ox) as usize;
                            drow[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into a volume.
pub(crate) fn col2im(cols: &[f64], vol: Volume, k: usize, out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let (d, h, w) = (vol.depth as isize, vol.height as isize, vol.width as isize);
    let v = vol.voxels();
    let mut row = 0;
    for ci in 0..vol.channels {
        let dst = &mut out[ci * v..(ci + 1) * v];
        for kz in 0..k as isize {
            for ky in 0..k as isize {
                for kx in 0..k as isize {
                    let src = &cols[row * v..(row + 1) * v];
                    let ox = kx - pad;
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = (w - ox).min(w).max(0) as usize;
                    for z in 0..d {
                        let sz = z + kz - pad;
                        if sz < 0 || sz >= d {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y + ky - pad;
                            if sy < 0 || sy >= h || x_lo >= x_hi {
                                continue;
                            }
                            let srow = &src[((z * h + y) * w) as usize..];
                            let base = ((sz * h + sy) * w) as isize;
                            let d0 = (base + x_lo as isize + ox) as usize;
                            for (o, &s) in dst[d0..d0 + (x_hi - x_lo)].iter_mut().zip(&srow[x_lo..x_hi]) {
                                *o += s;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Stride-1 "same" 3D convolution of a single `[cin, D, H, W]` volume with
/// weights `[cout, cin, k, k, k]` and optional bias `[cout]`.
pub fn conv3d_forward(
    input: &[f64],
    in_shape: &[usize],
    weight: &[f64],
    cout: usize,
    k: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let vol = Volume::from_shape(in_shape).expect("conv3d input must be [C, D, H, W]");
    let v = vol.voxels();
    let kk = vol.channels * k * k * k;
    let mut out = vec![0.0; cout * v];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(v).enumerate() {
            chunk.fill(b[co]);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if k == 1 {
        gemm(MatRef::new(weight, cout, kk), MatRef::new(input, kk, v), beta, &mut out);
    } else {
        let mut cols = vec![0.0; kk * v];
        im2col(input, vol, k, &mut cols);
        gemm(MatRef::new(weight, cout, kk), MatRef::new(&cols, kk, v), beta, &mut out);
    }
    out
}

/// Returns (grad_input, grad_weight, grad_bias) for [`conv3d_forward`].
pub(crate) fn conv3d_backward(
    input: &[f64],
    vol: Volume,
    weight: &[f64],
    cout: usize,
    k: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let v = vol.voxels();
    let kk = vol.channels * k * k * k;
    let grad_bias: Vec<f64> = grad_out.chunks(v).map(|c| c.iter().sum()).collect();
    let mut grad_weight = vec![0.0; cout * kk];
    let mut grad_input = vec![0.0; vol.channels * v];
    if k == 1 {
        gemm(
            MatRef::new(grad_out, cout, v),
            MatRef::new(input, kk, v).t(),
            0.0,
            &mut grad_weight,
        );
        gemm(
            MatRef::new(weight, cout, kk).t(),
            MatRef::new(grad_out, cout, v),
            0.0,
            &mut grad_input,
        );
    } else {
        let mut cols = vec![0.0; kk * v];
        im2col(input, vol, k, &mut cols);
        gemm(
            MatRef::new(grad_out, cout, v),
            MatRef::new(&cols, kk, v).t(),
            0.0,
            &mut grad_weight,
        );
        gemm(
            MatRef::new(weight, cout, kk).t(),
            MatRef::new(grad_out, cout, v),
            0.0,
            &mut cols,
        );
        col2im(&cols, vol, k, &mut grad_input);
    }
    (grad_input, grad_weight, grad_bias)
}

/// 2×2×2 average pooling.
pub(crate) fn avg_pool2(input: &[f64], vol: Volume) -> Vec<f64> {
    let (d2, h2, w2) = (vol.depth / 2, vol.height / 2, vol.width / 2);
    let mut out = vec![0.0; vol.channels * d2 * h2 * w2];
    let v = vol.voxels();
    let mut o = 0;
    for c in 0..vol.channels {
        let src = &input[c * v..(c + 1) * v];
        for z in 0..d2 {
            for y in 0..h2 {
                for x in 0..w2 {
                    let mut s = 0.0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let row = ((2 * z + dz) * vol.height + 2 * y + dy) * vol.width;
                            s += src[row + 2 * x] + src[row + 2 * x + 1];
                        }
                    }
                    out[o] = s * 0.125;
                    o += 1;
                }
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling; `vol` describes the coarse input.
pub(crate) fn upsample2(input: &[f64], vol: Volume) -> Vec<f64> {
    let (d2, h2, w2) = (vol.depth * 2, vol.height * 2, vol.width * 2);
    let v = vol.voxels();
    let mut out = vec![0.0; vol.channels * d2 * h2 * w2];
    let mut o = 0;
    for c in 0..vol.channels {
        let src = &input[c * v..(c + 1) * v];
        for z in 0..d2 {
            for y in 0..h2 {
                let row = ((z / 2) * vol.height + y / 2) * vol.width;
                for x in 0..w2 {
                    out[o] = src[row + x / 2];
                    o += 1;
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2³ block. `vol` is the coarse shape.
pub(crate) fn upsample2_adjoint(grad: &[f64], vol: Volume) -> Vec<f64> {
    let fine = Volume {
        channels: vol.channels,
        depth: vol.depth * 2,
        height: vol.height * 2,
        width: vol.width * 2,
    };
    avg_pool2(grad, fine).into_iter().map(|x| x * 8.0).collect()
}

/// Adjoint of [`avg_pool2`]; `vol` is the fine (input) shape.
pub(crate) fn avg_pool2_adjoint(grad: &[f64], vol: Volume) -> Vec<f64> {
    let coarse = Volume {
        channels: vol.channels,
        depth: vol.depth / 2,
        height: vol.height / 2,
        width: vol.width / 2,
    };
    upsample2(grad, coarse).into_iter().map(|x| x * 0.125).collect()
}

pub(crate) const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization of `[C, S]` data. Returns (output, per-group mean,
/// per-group reciprocal std).
pub(crate) fn group_norm(
    x: &[f64],
    channels: usize,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let s = x.len() / channels;
    let cpg = channels / groups;
    let n = (cpg * s) as f64;
    let mut out = vec![0.0; x.len()];
    let mut means = Vec::with_capacity(groups);
    let mut rstds = Vec::with_capacity(groups);
    for g in 0..groups {
        let span = &x[g * cpg * s..(g + 1) * cpg * s];
        let mean = span.iter().sum::<f64>() / n;
        let var = span.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        for c in g * cpg..(g + 1) * cpg {
            let (ga, be) = (gamma[c], beta[c]);
            for i in c * s..(c + 1) * s {
                out[i] = (x[i] - mean) * rstd * ga + be;
            }
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

/// Returns (grad_x, grad_gamma, grad_beta) for [`group_norm`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward(
    x: &[f64],
    channels: usize,
    groups: usize,
    gamma: &[f64],
    means: &[f64],
    rstds: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let s = x.len() / channels;
    let cpg = channels / groups;
    let n = (cpg * s) as f64;
    let mut gx = vec![0.0; x.len()];
    let mut ggamma = vec![0.0; channels];
    let mut gbeta = vec![0.0; channels];
    for g in 0..groups {
        let (mean, rstd) = (means[g], rstds[g]);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for c in g * cpg..(g + 1) * cpg {
            for i in c * s..(c + 1) * s {
                let xhat = (x[i] - mean) * rstd;
                let dy = grad_out[i];
                ggamma[c] += dy * xhat;
                gbeta[c] += dy;
                let dxhat = dy * gamma[c];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
        }
        for c in g * cpg..(g + 1) * cpg {
            for i in c * s..(c + 1) * s {
                let xhat = (x[i] - mean) * rstd;
                let dxhat = grad_out[i] * gamma[c];
                gx[i] = rstd / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Row-wise softmax over the last dimension of length `n`.
pub(crate) fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in dst.iter_mut() {
            *o /= z;
        }
    }
    out
}

pub(crate) fn softmax_rows_backward(y: &[f64], grad: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for ((yr, gr), or) in y.chunks(n).zip(grad.chunks(n)).zip(out.chunks_mut(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    out
}

//! Raw slice kernels behind the taped primitives.
//!
//! Convolution tensors are laid out `[batch, channels, length]`; conv
//! weights are `[out_channels, in_channels, kernel]` and transposed-conv
//! weights `[in_channels, out_channels, kernel]`, so one weight array serves
//! a conv and its adjoint.

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths are asserted above and the strides describe exactly
    // the row-major (or transposed) layout of each buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_transpose_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || len == 0 {
        return None;
    }
    ((len - 1) * stride + kernel).checked_sub(2 * pad).filter(|&l| l > 0)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c_in * self.kernel
    }
    fn cols_width(&self) -> usize {
        self.batch * self.len_out
    }
}

/// `cols[(ci·K + kk), b·Lout + t] = x[b, ci, t·s + kk − p]`.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let width = g.cols_width();
    let mut cols = vec![0.0; g.cols_rows() * width];
    for ci in 0..g.c_in {
        for kk in 0..g.kernel {
            let row = &mut cols[(ci * g.kernel + kk) * width..(ci * g.kernel + kk + 1) * width];
            for b in 0..g.batch {
                let xrow = &x[(b * g.c_in + ci) * g.len_in..(b * g.c_in + ci + 1) * g.len_in];
                for t in 0..g.len_out {
                    let pos = (t * g.stride + kk) as isize - g.pad as isize;
                    if pos >= 0 && (pos as usize) < g.len_in {
                        row[b * g.len_out + t] = xrow[pos as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let width = g.cols_width();
    let mut x = vec![0.0; g.batch * g.c_in * g.len_in];
    for ci in 0..g.c_in {
        for kk in 0..g.kernel {
            let row = &cols[(ci * g.kernel + kk) * width..(ci * g.kernel + kk + 1) * width];
            for b in 0..g.batch {
                let xrow = &mut x[(b * g.c_in + ci) * g.len_in..(b * g.c_in + ci + 1) * g.len_in];
                for t in 0..g.len_out {
                    let pos = (t * g.stride + kk) as isize - g.pad as isize;
                    if pos >= 0 && (pos as usize) < g.len_in {
                        xrow[pos as usize] += row[b * g.len_out + t];
                    }
                }
            }
        }
    }
    x
}

/// `[B, C, T]` → `[C, B·T]`.
fn to_channel_major(y: &[f64], batch: usize, ch: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for b in 0..batch {
        for c in 0..ch {
            let src = &y[(b * ch + c) * len..(b * ch + c + 1) * len];
            out[c * batch * len + b * len..c * batch * len + (b + 1) * len].copy_from_slice(src);
        }
    }
    out
}

/// `[C, B·T]` → `[B, C, T]`.
fn from_channel_major(y: &[f64], batch: usize, ch: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for b in 0..batch {
        for c in 0..ch {
            let src = &y[c * batch * len + b * len..c * batch * len + (b + 1) * len];
            out[(b * ch + c) * len..(b * ch + c + 1) * len].copy_from_slice(src);
        }
    }
    out
}

pub fn conv1d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let mut y = vec![0.0; g.c_out * g.cols_width()];
    gemm(g.c_out, g.cols_rows(), g.cols_width(), w, false, &cols, false, 0.0, &mut y);
    from_channel_major(&y, g.batch, g.c_out, g.len_out)
}

/// Gradient of a conv w.r.t. its input, i.e. the transposed convolution of
/// `dy` with the same weights.
pub fn conv1d_input_grad(dy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let dy_cm = to_channel_major(dy, g.batch, g.c_out, g.len_out);
    let mut dcols = vec![0.0; g.cols_rows() * g.cols_width()];
    gemm(g.cols_rows(), g.c_out, g.cols_width(), w, true, &dy_cm, false, 0.0, &mut dcols);
    col2im(&dcols, g)
}

pub fn conv1d_weight_grad(x: &[f64], dy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let dy_cm = to_channel_major(dy, g.batch, g.c_out, g.len_out);
    let mut dw = vec![0.0; g.c_out * g.cols_rows()];
    gemm(g.c_out, g.cols_width(), g.cols_rows(), &dy_cm, false, &cols, true, 0.0, &mut dw);
    dw
}

/// Max-pool with window 2, stride 2 over `[rows, len]` (rows = B·C).
/// Returns the pooled values and the flat argmax index of each output.
pub fn maxpool2(x: &[f64], rows: usize, len: usize) -> (Vec<f64>, Vec<usize>) {
    let out_len = len / 2;
    let mut y = Vec::with_capacity(rows * out_len);
    let mut arg = Vec::with_capacity(rows * out_len);
    for r in 0..rows {
        for t in 0..out_len {
            let i = r * len + 2 * t;
            let j = if x[i + 1] > x[i] { i + 1 } else { i };
            y.push(x[j]);
            arg.push(j);
        }
    }
    (y, arg)
}

pub fn upsample2(x: &[f64], rows: usize, len: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(rows * len * 2);
    for r in 0..rows {
        for t in 0..len {
            let v = x[r * len + t];
            y.push(v);
            y.push(v);
        }
    }
    y
}

pub fn upsample2_grad(dy: &[f64], rows: usize, len: usize) -> Vec<f64> {
    (0..rows * len).map(|i| dy[2 * i] + dy[2 * i + 1]).collect()
}

/// Per-channel statistics of `[B, C, L]`: `(mean, biased variance)`.
pub fn channel_stats(x: &[f64], batch: usize, ch: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * len) as f64;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let mut s = 0.0;
        for b in 0..batch {
            s += x[(b * ch + c) * len..(b * ch + c + 1) * len].iter().sum::<f64>();
        }
        let m = s / n;
        let mut v = 0.0;
        for b in 0..batch {
            v += x[(b * ch + c) * len..(b * ch + c + 1) * len]
                .iter()
                .map(|&e| (e - m) * (e - m))
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = v / n;
    }
    (mean, var)
}

/// Applies `y = gamma · (x − mean) · inv_std + beta` per channel and
/// returns `(y, xhat)`.
pub fn channel_affine(
    x: &[f64],
    batch: usize,
    ch: usize,
    len: usize,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let off = (b * ch + c) * len;
            for t in 0..len {
                let h = (x[off + t] - mean[c]) * inv_std[c];
                xhat[off + t] = h;
                y[off + t] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, xhat)
}

/// Per-channel sums of `a` and of `a ∘ b`.
pub fn channel_sums(a: &[f64], b: &[f64], batch: usize, ch: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
    let mut s = vec![0.0; ch];
    let mut sp = vec![0.0; ch];
    for bi in 0..batch {
        for c in 0..ch {
            let off = (bi * ch + c) * len;
            for t in 0..len {
                s[c] += a[off + t];
                sp[c] += a[off + t] * b[off + t];
            }
        }
    }
    (s, sp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1., 2., 3., 4.];
        let b = [5., 6., 7., 8.];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19., 22., 43., 50.]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26., 30., 38., 44.]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17., 23., 39., 53.]);
    }

    #[test]
    fn output_lengths() {
        assert_eq!(conv_out_len(3, 2, 1, 0), Some(2));
        assert_eq!(conv_out_len(100, 3, 1, 1), Some(100));
        assert_eq!(conv_out_len(2, 5, 1, 0), None);
        assert_eq!(conv_out_len(5, 1, 0, 0), None);
        assert_eq!(conv_transpose_out_len(13, 2, 2, 0), Some(26));
    }

    #[test]
    fn maxpool_picks_window_max() {
        let (y, arg) = maxpool2(&[4., 1., 3., 2.], 1, 4);
        assert_eq!(y, vec![4., 3.]);
        assert_eq!(arg, vec![0, 2]);
    }
}

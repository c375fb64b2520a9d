//! Slice-level forward and backward kernels used by the tape.

/// Geometry of a single-image 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub padding: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn out_len(&self) -> usize {
        self.c_out * self.out_h * self.out_w
    }
}

/// Output positions `o` in `0..out_len` whose source index `o*stride + k - pad`
/// lands inside `0..in_len`, as a half-open range.
fn valid_range(out_len: usize, in_len: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o*stride + k - pad <= in_len - 1
    let limit = in_len + pad;
    let hi = if limit <= k {
        0
    } else {
        ((limit - k - 1) / stride + 1).min(out_len)
    };
    let lo = lo.min(out_len);
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.out_len()];
    for o in 0..g.c_out {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(bias[o]);
        for c in 0..g.c_in {
            let in_plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (y_lo, y_hi) = valid_range(g.out_h, g.h, ky, g.padding, g.stride);
                for kx in 0..g.kw {
                    let wv = kernel[((o * g.c_in + c) * g.kh + ky) * g.kw + kx];
                    let (x_lo, x_hi) = valid_range(g.out_w, g.w, kx, g.padding, g.stride);
                    if x_lo == x_hi || wv == 0.0 {
                        continue;
                    }
                    for oy in y_lo..y_hi {
                        let iy = oy * g.stride + ky - g.padding;
                        let in_row = &in_plane[iy * g.w..(iy + 1) * g.w];
                        let out_row = &mut out_plane[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride == 1 {
                            let ix0 = x_lo + kx - g.padding;
                            let src = &in_row[ix0..ix0 + (x_hi - x_lo)];
                            for (dst, s) in out_row[x_lo..x_hi].iter_mut().zip(src) {
                                *dst += wv * s;
                            }
                        } else {
                            for ox in x_lo..x_hi {
                                out_row[ox] += wv * in_row[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want: [bool; 3],
) -> ConvGrads {
    let plane = g.out_h * g.out_w;
    let in_plane_len = g.h * g.w;
    let mut d_input = want[0].then(|| vec![0.0; input.len()]);
    let mut d_kernel = want[1].then(|| vec![0.0; kernel.len()]);
    let d_bias = want[2].then(|| {
        (0..g.c_out)
            .map(|o| grad_out[o * plane..(o + 1) * plane].iter().sum())
            .collect()
    });
    if d_input.is_some() || d_kernel.is_some() {
        for o in 0..g.c_out {
            let go_plane = &grad_out[o * plane..(o + 1) * plane];
            for c in 0..g.c_in {
                let in_off = c * in_plane_len;
                for ky in 0..g.kh {
                    let (y_lo, y_hi) = valid_range(g.out_h, g.h, ky, g.padding, g.stride);
                    for kx in 0..g.kw {
                        let k_idx = ((o * g.c_in + c) * g.kh + ky) * g.kw + kx;
                        let wv = kernel[k_idx];
                        let (x_lo, x_hi) = valid_range(g.out_w, g.w, kx, g.padding, g.stride);
                        let mut dw = 0.0;
                        for oy in y_lo..y_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let row_off = in_off + iy * g.w;
                            let go_row = &go_plane[oy * g.out_w..(oy + 1) * g.out_w];
                            for ox in x_lo..x_hi {
                                let ix = ox * g.stride + kx - g.padding;
                                let go = go_row[ox];
                                dw += go * input[row_off + ix];
                                if let Some(di) = d_input.as_mut() {
                                    di[row_off + ix] += wv * go;
                                }
                            }
                        }
                        if let Some(dk) = d_kernel.as_mut() {
                            dk[k_idx] += dw;
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}

/// Affine map over `input` laid out as `in_dim × positions` (feature-major):
/// `out[o, p] = bias[o] + Σ_i weight[o, i] · input[i, p]`.
pub(crate) fn dense_cols_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    in_dim: usize,
    out_dim: usize,
    positions: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; out_dim * positions];
    for o in 0..out_dim {
        let row = &mut out[o * positions..(o + 1) * positions];
        row.fill(bias[o]);
        accumulate_rows(row, &weight[o * in_dim..(o + 1) * in_dim], input, positions);
    }
    out
}

/// `acc += Σ_i coeffs[i] · rows[i]`, where `rows` holds `coeffs.len()`
/// consecutive rows of length `len`. Four rows are folded in per pass.
fn accumulate_rows(acc: &mut [f64], coeffs: &[f64], rows: &[f64], len: usize) {
    let mut i = 0;
    while i + 4 <= coeffs.len() {
        let [c0, c1, c2, c3] = [coeffs[i], coeffs[i + 1], coeffs[i + 2], coeffs[i + 3]];
        if c0 != 0.0 || c1 != 0.0 || c2 != 0.0 || c3 != 0.0 {
            let block = &rows[i * len..(i + 4) * len];
            let (r0, rest) = block.split_at(len);
            let (r1, rest) = rest.split_at(len);
            let (r2, r3) = rest.split_at(len);
            for p in 0..len {
                acc[p] += c0 * r0[p] + c1 * r1[p] + c2 * r2[p] + c3 * r3[p];
            }
        }
        i += 4;
    }
    for (j, &c) in coeffs.iter().enumerate().skip(i) {
        if c == 0.0 {
            continue;
        }
        for (dst, x) in acc.iter_mut().zip(&rows[j * len..(j + 1) * len]) {
            *dst += c * x;
        }
    }
}

pub(crate) struct DenseGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn dense_cols_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    in_dim: usize,
    out_dim: usize,
    positions: usize,
    want: [bool; 3],
) -> DenseGrads {
    let input_grad = want[0].then(|| {
        let mut di = vec![0.0; in_dim * positions];
        let mut column = vec![0.0; out_dim];
        for i in 0..in_dim {
            for (o, c) in column.iter_mut().enumerate() {
                *c = weight[o * in_dim + i];
            }
            accumulate_rows(&mut di[i * positions..(i + 1) * positions], &column, grad_out, positions);
        }
        di
    });
    let weight_grad = want[1].then(|| {
        let mut dw = vec![0.0; out_dim * in_dim];
        for o in 0..out_dim {
            let go_row = &grad_out[o * positions..(o + 1) * positions];
            for i in 0..in_dim {
                let x_row = &input[i * positions..(i + 1) * positions];
                dw[o * in_dim + i] = go_row.iter().zip(x_row).map(|(g, x)| g * x).sum();
            }
        }
        dw
    });
    let bias_grad = want[2].then(|| {
        (0..out_dim)
            .map(|o| grad_out[o * positions..(o + 1) * positions].iter().sum())
            .collect()
    });
    DenseGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// Affine map over `input` laid out as `rows × in_dim` (row-major vectors):
/// `out[n, o] = bias[o] + Σ_i weight[o, i] · input[n, i]`.
pub(crate) fn dense_rows_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    in_dim: usize,
    out_dim: usize,
    rows: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * out_dim);
    for n in 0..rows {
        let x = &input[n * in_dim..(n + 1) * in_dim];
        for o in 0..out_dim {
            let w_row = &weight[o * in_dim..(o + 1) * in_dim];
            out.push(bias[o] + w_row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>());
        }
    }
    out
}

pub(crate) fn dense_rows_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    in_dim: usize,
    out_dim: usize,
    rows: usize,
    want: [bool; 3],
) -> DenseGrads {
    let input_grad = want[0].then(|| {
        let mut di = vec![0.0; rows * in_dim];
        for n in 0..rows {
            let di_row = &mut di[n * in_dim..(n + 1) * in_dim];
            for o in 0..out_dim {
                let go = grad_out[n * out_dim + o];
                let w_row = &weight[o * in_dim..(o + 1) * in_dim];
                for (dst, w) in di_row.iter_mut().zip(w_row) {
                    *dst += go * w;
                }
            }
        }
        di
    });
    let weight_grad = want[1].then(|| {
        let mut dw = vec![0.0; out_dim * in_dim];
        for n in 0..rows {
            let x = &input[n * in_dim..(n + 1) * in_dim];
            for o in 0..out_dim {
                let go = grad_out[n * out_dim + o];
                let dw_row = &mut dw[o * in_dim..(o + 1) * in_dim];
                for (dst, xv) in dw_row.iter_mut().zip(x) {
                    *dst += go * xv;
                }
            }
        }
        dw
    });
    let bias_grad = want[2].then(|| {
        let mut db = vec![0.0; out_dim];
        for n in 0..rows {
            for (o, dst) in db.iter_mut().enumerate() {
                *dst += grad_out[n * out_dim + o];
            }
        }
        db
    });
    DenseGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// Index of the first maximum in iteration order.
pub(crate) fn first_argmax(values: impl Iterator<Item = (usize, f64)>) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, v) in values {
        if best.0 == usize::MAX || v > best.1 {
            best = (i, v);
        }
    }
    best
}

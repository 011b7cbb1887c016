//! Raw buffer kernels behind the differentiable ops. Convolution is lowered to
//! im2col + GEMM, one sample at a time.

/// Geometry of a 2-D convolution over one NCHW batch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols_len(&self) -> usize {
        self.cols_rows() * self.ho * self.wo
    }
}

/// Output extent along one spatial axis, or `None` if the kernel does not fit.
pub fn conv2d_output_size(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// `c = alpha * a * b + beta * c` where `a` is m x k and `b` is k x n, given as
/// (row stride, column stride) pairs; `c` is dense row-major m x n.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(
        a.len() >= last(m, k, a_strides),
        "gemm: lhs buffer too short"
    );
    assert!(
        b.len() >= last(k, n, b_strides),
        "gemm: rhs buffer too short"
    );
    assert!(c.len() >= m * n, "gemm: output buffer too short");
    // SAFETY: the asserts above bound every index dgemm touches for these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        let chan = &image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        let chan = &mut image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * plane;
    let mut out = vec![0.0; g.n * out_len];
    let mut cols = vec![0.0; g.cols_len()];
    for s in 0..g.n {
        im2col(g, &input[s * in_len..(s + 1) * in_len], &mut cols);
        let y = &mut out[s * out_len..(s + 1) * out_len];
        for (o, row) in y.chunks_mut(plane).enumerate() {
            row.fill(bias[o]);
        }
        let kk = g.cols_rows();
        gemm(g.o, kk, plane, weight, (kk, 1), &cols, (plane, 1), y, 1.0);
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want: (bool, bool, bool),
) -> ConvGrads {
    let plane = g.ho * g.wo;
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * plane;
    let kk = g.cols_rows();
    let mut d_input = want.0.then(|| vec![0.0; g.n * in_len]);
    let mut d_weight = want.1.then(|| vec![0.0; g.o * kk]);
    let mut d_bias = want.2.then(|| vec![0.0; g.o]);
    let mut cols = vec![0.0; g.cols_len()];
    for s in 0..g.n {
        let dy = &grad_out[s * out_len..(s + 1) * out_len];
        if let Some(db) = d_bias.as_mut() {
            for (o, row) in dy.chunks(plane).enumerate() {
                db[o] += row.iter().sum::<f64>();
            }
        }
        if let Some(dw) = d_weight.as_mut() {
            im2col(g, &input[s * in_len..(s + 1) * in_len], &mut cols);
            // dW[o, r] += sum_p dY[o, p] * cols[r, p]
            gemm(g.o, plane, kk, dy, (plane, 1), &cols, (1, plane), dw, 1.0);
        }
        if let Some(dx) = d_input.as_mut() {
            // dcols[r, p] = sum_o W[o, r] * dY[o, p]
            gemm(
                kk,
                g.o,
                plane,
                weight,
                (1, kk),
                dy,
                (plane, 1),
                &mut cols,
                0.0,
            );
            col2im(g, &cols, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}

/// `y[n, o] = sum_i x[n, i] * w[o, i] + b[o]`.
pub(crate) fn dense_forward(
    n: usize,
    inp: usize,
    out: usize,
    x: &[f64],
    w: &[f64],
    b: &[f64],
) -> Vec<f64> {
    let mut y: Vec<f64> = (0..n).flat_map(|_| b.iter().copied()).collect();
    gemm(n, inp, out, x, (inp, 1), w, (1, inp), &mut y, 1.0);
    y
}

pub(crate) fn dense_backward_input(
    n: usize,
    inp: usize,
    out: usize,
    dy: &[f64],
    w: &[f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * inp];
    gemm(n, out, inp, dy, (out, 1), w, (inp, 1), &mut dx, 0.0);
    dx
}

pub(crate) fn dense_backward_weight(
    n: usize,
    inp: usize,
    out: usize,
    dy: &[f64],
    x: &[f64],
) -> Vec<f64> {
    let mut dw = vec![0.0; out * inp];
    gemm(out, n, inp, dy, (1, out), x, (inp, 1), &mut dw, 0.0);
    dw
}

//! Batched conv and pool kernels on NCHW buffers.
//!
//! Convolution lowers to one GEMM per batch: the im2col matrix is
//! `[C·k·k, N·OH·OW]` with columns ordered by `(n, oh, ow)`.

use super::spec::ConvBlock;

/// `c[m×n] = a[m×k] · b[k×n]`, arbitrary strides, overwrites `c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller-provided slices cover every index reachable from the
    // given dimensions and strides, which the debug assertions above and the
    // call sites' buffer sizes guarantee.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(n: usize, input: [usize; 3], block: &ConvBlock, out: [usize; 3]) -> Self {
        ConvGeom {
            n,
            c: input[0],
            h: input[1],
            w: input[2],
            cout: block.out_channels,
            k: block.kernel_size,
            stride: block.stride,
            pad: block.padding,
            oh: out[1],
            ow: out[2],
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

pub(crate) fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (g.rows(), g.cols());
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; rows * cols];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let row = &mut out[r * cols..(r + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oh in 0..g.oh {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih as usize >= g.h {
                            continue;
                        }
                        let base = n * plane + oh * g.ow;
                        let src_row = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for ow in 0..g.ow {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && (iw as usize) < g.w {
                                row[base + ow] = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im(g: &ConvGeom, dcols: &[f64]) -> Vec<f64> {
    let cols = g.cols();
    let plane = g.oh * g.ow;
    let mut dx = vec![0.0; g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let row = &dcols[r * cols..(r + 1) * cols];
                for n in 0..g.n {
                    let dst_base = (n * g.c + c) * g.h * g.w;
                    for oh in 0..g.oh {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih as usize >= g.h {
                            continue;
                        }
                        let base = n * plane + oh * g.ow;
                        for ow in 0..g.ow {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && (iw as usize) < g.w {
                                dx[dst_base + ih as usize * g.w + iw as usize] += row[base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Returns `(output NCHW, im2col matrix)`.
pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(g, x);
    let (rows, m) = (g.rows(), g.cols());
    let mut out_cm = vec![0.0; g.cout * m];
    gemm(g.cout, rows, m, weight, (rows as isize, 1), &cols, (m as isize, 1), &mut out_cm);
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.cout * plane];
    for co in 0..g.cout {
        let b = bias[co];
        for n in 0..g.n {
            let src = &out_cm[co * m + n * plane..co * m + (n + 1) * plane];
            let dst = &mut out[(n * g.cout + co) * plane..(n * g.cout + co + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads {
    /// Empty when no im2col matrix was supplied.
    pub dweight: Vec<f64>,
    pub dbias: Vec<f64>,
    pub dinput: Option<Vec<f64>>,
}

/// Parameter gradients are computed only when `cols` is given.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    cols: Option<&[f64]>,
    weight: &[f64],
    dout: &[f64],
    need_input_grad: bool,
) -> ConvGrads {
    let (rows, m) = (g.rows(), g.cols());
    let plane = g.oh * g.ow;
    let mut dout_cm = vec![0.0; g.cout * m];
    let mut dbias = vec![0.0; g.cout];
    for n in 0..g.n {
        for co in 0..g.cout {
            let src = &dout[(n * g.cout + co) * plane..(n * g.cout + co + 1) * plane];
            dout_cm[co * m + n * plane..co * m + (n + 1) * plane].copy_from_slice(src);
        }
    }
    for co in 0..g.cout {
        dbias[co] = dout_cm[co * m..(co + 1) * m].iter().sum();
    }
    let dweight = match cols {
        Some(cols) => {
            let mut dw = vec![0.0; g.cout * rows];
            // dW = dOut · colsᵀ
            gemm(g.cout, m, rows, &dout_cm, (m as isize, 1), cols, (1, m as isize), &mut dw);
            dw
        }
        None => Vec::new(),
    };
    let dinput = need_input_grad.then(|| {
        let mut dcols = vec![0.0; rows * m];
        // dCols = Wᵀ · dOut
        gemm(rows, g.cout, m, weight, (1, rows as isize), &dout_cm, (m as isize, 1), &mut dcols);
        col2im(g, &dcols)
    });
    ConvGrads {
        dweight,
        dbias,
        dinput,
    }
}

/// 2×2 stride-2 max pool (floor). Returns output and flat argmax into the input.
pub(crate) fn maxpool2_forward(x: &[f64], nc: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; nc * oh * ow];
    let mut arg = vec![0u32; nc * oh * ow];
    for p in 0..nc {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                let o = (p * oh + i) * ow + j;
                out[o] = x[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward(dout: &[f64], arg: &[u32], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&g, &a) in dout.iter().zip(arg) {
        dx[a as usize] += g;
    }
    dx
}

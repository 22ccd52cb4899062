// Raw slice kernels behind the tape ops. Shapes are validated by the caller.
//
// Convolutions go through im2col and a packed GEMM; the remaining loops run
// over a contiguous channel axis.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub kh: usize,
    pub kw: usize,
    pub co: usize,
    pub stride: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.h - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.kw) / self.stride + 1
    }

    fn row_len(&self) -> usize {
        self.kw * self.ci
    }

    fn in_offset(&self, n: usize, y: usize, x: usize) -> usize {
        ((n * self.h + y) * self.w + x) * self.ci
    }
}

/// Unrolls every receptive field into one row of a `[pixels, kh·kw·ci]`
/// matrix. Each kernel row of a field is a contiguous `kw·ci` slice of `x`.
fn im2col(x: &[f64], d: ConvDims) -> Vec<f64> {
    let (ho, wo) = (d.out_h(), d.out_w());
    let row = d.row_len();
    let kk = d.kh * row;
    let mut col = vec![0.0; d.n * ho * wo * kk];
    for (px, field) in col.chunks_exact_mut(kk).enumerate() {
        let ox = px % wo;
        let oy = (px / wo) % ho;
        let n = px / (wo * ho);
        for (ky, dst) in field.chunks_exact_mut(row).enumerate() {
            let start = d.in_offset(n, oy * d.stride + ky, ox * d.stride);
            dst.copy_from_slice(&x[start..start + row]);
        }
    }
    col
}

fn col2im_add(col: &[f64], dx: &mut [f64], d: ConvDims) {
    let (ho, wo) = (d.out_h(), d.out_w());
    let row = d.row_len();
    for (px, field) in col.chunks_exact(d.kh * row).enumerate() {
        let ox = px % wo;
        let oy = (px / wo) % ho;
        let n = px / (wo * ho);
        for (ky, src) in field.chunks_exact(row).enumerate() {
            let start = d.in_offset(n, oy * d.stride + ky, ox * d.stride);
            dx[start..start + row]
                .iter_mut()
                .zip(src)
                .for_each(|(a, b)| *a += b);
        }
    }
}

/// `c = a·b + beta·c` for row-major `a: [m, k]`, `b: [k, n]`. Transposed
/// operands are expressed through the strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || n == 0 || ((m - 1) * rsa + (k - 1) * csa < a.len()));
    assert!(m == 0 || k == 0 || n == 0 || ((k - 1) * rsb + (n - 1) * csb < b.len()));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every element the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
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

fn is_pointwise(d: ConvDims) -> bool {
    d.kh == 1 && d.kw == 1 && d.stride == 1
}

pub(crate) fn conv2d_forward(x: &[f64], k: &[f64], b: &[f64], d: ConvDims) -> Vec<f64> {
    let pixels = d.n * d.out_h() * d.out_w();
    let kk = d.kh * d.row_len();
    let mut out: Vec<f64> = std::iter::repeat_n(b, pixels).flatten().copied().collect();
    let owned;
    let col = if is_pointwise(d) {
        x
    } else {
        owned = im2col(x, d);
        &owned
    };
    gemm(pixels, kk, d.co, col, (kk, 1), k, (d.co, 1), 1.0, &mut out);
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(x: &[f64], k: &[f64], dout: &[f64], d: ConvDims, want: [bool; 3]) -> ConvGrads {
    let pixels = d.n * d.out_h() * d.out_w();
    let kk = d.kh * d.row_len();

    let bias = want[2].then(|| {
        let mut db = vec![0.0; d.co];
        for g in dout.chunks_exact(d.co) {
            db.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        db
    });

    let kernel = want[1].then(|| {
        let owned;
        let col = if is_pointwise(d) {
            x
        } else {
            owned = im2col(x, d);
            &owned
        };
        // dK = colᵀ · dout
        let mut dk = vec![0.0; k.len()];
        gemm(kk, pixels, d.co, col, (1, kk), dout, (d.co, 1), 0.0, &mut dk);
        dk
    });

    let input = want[0].then(|| {
        // dcol = dout · Kᵀ
        let mut dcol = vec![0.0; pixels * kk];
        gemm(pixels, d.co, kk, dout, (d.co, 1), k, (1, d.co), 0.0, &mut dcol);
        if is_pointwise(d) {
            dcol
        } else {
            let mut dx = vec![0.0; x.len()];
            col2im_add(&dcol, &mut dx, d);
            dx
        }
    });

    ConvGrads { input, kernel, bias }
}

/// Square-window average pooling, floor semantics on the trailing edge.
pub(crate) fn avgpool_forward(x: &[f64], [n, h, w, c]: [usize; 4], window: usize, stride: usize) -> Vec<f64> {
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let scale = 1.0 / (window * window) as f64;
    let mut out = vec![0.0; n * ho * wo * c];
    for (px, out_px) in out.chunks_exact_mut(c).enumerate() {
        let ox = px % wo;
        let oy = (px / wo) % ho;
        let b = px / (wo * ho);
        for dy in 0..window {
            for dx in 0..window {
                let off = ((b * h + oy * stride + dy) * w + ox * stride + dx) * c;
                out_px.iter_mut().zip(&x[off..off + c]).for_each(|(o, v)| *o += v);
            }
        }
        out_px.iter_mut().for_each(|o| *o *= scale);
    }
    out
}

pub(crate) fn avgpool_backward(
    dout: &[f64],
    [n, h, w, c]: [usize; 4],
    window: usize,
    stride: usize,
) -> Vec<f64> {
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let scale = 1.0 / (window * window) as f64;
    let mut dx = vec![0.0; n * h * w * c];
    for (px, g) in dout.chunks_exact(c).enumerate() {
        let ox = px % wo;
        let oy = (px / wo) % ho;
        let b = px / (wo * ho);
        for dy in 0..window {
            for ddx in 0..window {
                let off = ((b * h + oy * stride + dy) * w + ox * stride + ddx) * c;
                dx[off..off + c]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, gv)| *d += gv * scale);
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over every row of a `[m, c]` view.
pub(crate) fn channel_moments(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for row in x.chunks_exact(c) {
        mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    mean.iter_mut().for_each(|a| *a /= m);
    let mut var = vec![0.0; c];
    for row in x.chunks_exact(c) {
        for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - mu;
            *a += d * d;
        }
    }
    var.iter_mut().for_each(|a| *a /= m);
    (mean, var)
}

/// `y = x · w + b` for `x: [rows, n]`, `w: [n, m]`.
pub(crate) fn dense_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, m: usize) -> Vec<f64> {
    let rows = x.len() / n;
    let mut out = vec![0.0; rows * m];
    for (xr, yr) in x.chunks_exact(n).zip(out.chunks_exact_mut(m)) {
        if let Some(b) = b {
            yr.copy_from_slice(b);
        }
        for (&a, wr) in xr.iter().zip(w.chunks_exact(m)) {
            yr.iter_mut().zip(wr).for_each(|(y, wv)| *y += a * wv);
        }
    }
    out
}

pub(crate) fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, yr) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - max).exp();
            sum += *y;
        }
        yr.iter_mut().for_each(|y| *y /= sum);
    }
    out
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

//! Same-padded 2-D convolution on `[C, H, W]` activations, lowered to GEMM
//! through an im2col buffer.

use serde::{Deserialize, Serialize};

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, all row-major unless the
/// transpose flags say otherwise.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths were checked above and the strides describe
    // exactly an (m x k), (k x n) and (m x n) matrix inside them.
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

/// Spatial geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_dim(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    /// Rows of the im2col matrix: `c_in * k * k`.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

/// Kernel `[c_out, c_in, k, k]` and bias `[c_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride,
            weight: vec![0.0; c_out * c_in * kernel * kernel],
            bias: vec![0.0; c_out],
        }
    }

    pub fn shape(&self) -> ConvShape {
        ConvShape {
            c_in: self.c_in,
            c_out: self.c_out,
            kernel: self.kernel,
            stride: self.stride,
        }
    }

    /// Pre-activation output `[c_out, h_out, w_out]` for input `[c_in, h, w]`.
    pub fn forward(&self, x: &[f64], h: usize, w: usize, scratch: &mut Vec<f64>) -> (Vec<f64>, usize, usize) {
        let shape = self.shape();
        let (ho, wo) = shape.out_dim(h, w);
        let p = ho * wo;
        let mut out = vec![0.0; self.c_out * p];
        for (co, chunk) in out.chunks_mut(p).enumerate() {
            chunk.fill(self.bias[co]);
        }
        if self.kernel == 1 && self.stride == 1 {
            gemm(self.c_out, self.c_in, p, &self.weight, false, x, false, 1.0, &mut out);
        } else {
            im2col(x, h, w, &shape, scratch);
            gemm(self.c_out, shape.patch_len(), p, &self.weight, false, scratch, false, 1.0, &mut out);
        }
        (out, ho, wo)
    }

    /// Accumulates kernel and bias gradients into `grad` and, when
    /// `dx` is given, writes the input gradient there.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        x: &[f64],
        h: usize,
        w: usize,
        dout: &[f64],
        grad: &mut Conv2d,
        dx: Option<&mut Vec<f64>>,
        scratch: &mut Vec<f64>,
    ) {
        let shape = self.shape();
        let (ho, wo) = shape.out_dim(h, w);
        let p = ho * wo;
        let k = shape.patch_len();
        for (co, chunk) in dout.chunks(p).enumerate() {
            grad.bias[co] += chunk.iter().sum::<f64>();
        }
        let direct = self.kernel == 1 && self.stride == 1;
        let cols: &[f64] = if direct {
            x
        } else {
            im2col(x, h, w, &shape, scratch);
            scratch
        };
        gemm(self.c_out, p, k, dout, false, cols, true, 1.0, &mut grad.weight);
        if let Some(dx) = dx {
            let mut dcols = vec![0.0; k * p];
            gemm(k, self.c_out, p, &self.weight, true, dout, false, 0.0, &mut dcols);
            if direct {
                *dx = dcols;
            } else {
                col2im(&dcols, h, w, &shape, dx);
            }
        }
    }
}

fn im2col(x: &[f64], h: usize, w: usize, s: &ConvShape, cols: &mut Vec<f64>) {
    let (ho, wo) = s.out_dim(h, w);
    let p = ho * wo;
    let pad = s.pad() as isize;
    cols.clear();
    cols.resize(s.patch_len() * p, 0.0);
    let mut row = 0;
    for ci in 0..s.c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..s.kernel {
            for kx in 0..s.kernel {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * s.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s.stride + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(cols: &[f64], h: usize, w: usize, s: &ConvShape, dx: &mut Vec<f64>) {
    let (ho, wo) = s.out_dim(h, w);
    let p = ho * wo;
    let pad = s.pad() as isize;
    dx.clear();
    dx.resize(s.c_in * h * w, 0.0);
    let mut row = 0;
    for ci in 0..s.c_in {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..s.kernel {
            for kx in 0..s.kernel {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * s.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * s.stride + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

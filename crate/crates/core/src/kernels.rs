//! Raw numeric kernels over row-major slices. No shape checking beyond debug asserts;
//! callers in [`crate::tape`] validate shapes first.

/// `c = op(a) * op(b) + beta * c` for row-major matrices, `op(a)` being `m x k` and
/// `op(b)` being `k x n`. With `a_t` set, `a` is stored as `k x m`; with `b_t`, `b`
/// is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index reached through the given
    // strides lies inside the slices.
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

/// Geometry of a 2-D convolution or pooling window applied to one image plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad.0 - self.kh) / self.stride.0 + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad.1 - self.kw) / self.stride.1 + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == (1, 1) && self.pad == (0, 0)
    }
}

/// Unfolds `channels` planes into a `(channels*kh*kw) x (out_h*out_w)` matrix.
fn im2col(input: &[f64], channels: usize, g: &Window, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.in_h * g.in_w;
    let mut row = 0;
    for c in 0..channels {
        let src = &input[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let y = (oi * g.stride.0 + ki) as isize - g.pad.0 as isize;
                    let line = &mut dst[oi * ow..(oi + 1) * ow];
                    if y < 0 || y >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let y = y as usize;
                    for (oj, slot) in line.iter_mut().enumerate() {
                        let x = (oj * g.stride.1 + kj) as isize - g.pad.1 as isize;
                        *slot = if x < 0 || x >= g.in_w as isize {
                            0.0
                        } else {
                            src[y * g.in_w + x as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input planes.
fn col2im(cols: &[f64], channels: usize, g: &Window, out: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.in_h * g.in_w;
    let mut row = 0;
    for c in 0..channels {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let y = (oi * g.stride.0 + ki) as isize - g.pad.0 as isize;
                    if y < 0 || y >= g.in_h as isize {
                        continue;
                    }
                    let y = y as usize;
                    for oj in 0..ow {
                        let x = (oj * g.stride.1 + kj) as isize - g.pad.1 as isize;
                        if x >= 0 && (x as usize) < g.in_w {
                            dst[y * g.in_w + x as usize] += src[oi * ow + oj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation of `batch` images `[cin, h, w]` with `weight[cout, cin, kh, kw]`.
pub(crate) fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    g: &Window,
) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let patch = cin * g.kh * g.kw;
    let in_stride = cin * g.in_h * g.in_w;
    let out_stride = cout * oh * ow;
    let mut out = vec![0.0; batch * out_stride];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; patch * oh * ow]
    };
    for n in 0..batch {
        let x = &input[n * in_stride..(n + 1) * in_stride];
        let y = &mut out[n * out_stride..(n + 1) * out_stride];
        if g.is_pointwise() {
            gemm(cout, patch, oh * ow, weight, false, x, false, y, 0.0);
        } else {
            im2col(x, cin, g, &mut cols);
            gemm(cout, patch, oh * ow, weight, false, &cols, false, y, 0.0);
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input and weight.
pub(crate) fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    g: &Window,
) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let patch = cin * g.kh * g.kw;
    let in_stride = cin * g.in_h * g.in_w;
    let out_stride = cout * oh * ow;
    let mut grad_in = vec![0.0; input.len()];
    let mut grad_w = vec![0.0; weight.len()];
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![0.0; patch * oh * ow]
    };
    let mut dcols = if pointwise {
        Vec::new()
    } else {
        vec![0.0; patch * oh * ow]
    };
    for n in 0..batch {
        let x = &input[n * in_stride..(n + 1) * in_stride];
        let dy = &grad_out[n * out_stride..(n + 1) * out_stride];
        let dx = &mut grad_in[n * in_stride..(n + 1) * in_stride];
        if pointwise {
            gemm(cout, oh * ow, patch, dy, false, x, true, &mut grad_w, 1.0);
            gemm(patch, cout, oh * ow, weight, true, dy, false, dx, 0.0);
        } else {
            im2col(x, cin, g, &mut cols);
            gemm(cout, oh * ow, patch, dy, false, &cols, true, &mut grad_w, 1.0);
            gemm(patch, cout, oh * ow, weight, true, dy, false, &mut dcols, 0.0);
            col2im(&dcols, cin, g, dx);
        }
    }
    (grad_in, grad_w)
}

/// Max pooling over `planes` image planes; returns values and flat argmax indices
/// into the input.
pub(crate) fn max_pool_forward(input: &[f64], planes: usize, g: &Window) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.in_h * g.in_w;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * plane;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base;
                for ki in 0..g.kh {
                    let y = oi * g.stride.0 + ki;
                    for kj in 0..g.kw {
                        let idx = base + y * g.in_w + oj * g.stride.1 + kj;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avg_pool_forward(input: &[f64], planes: usize, g: &Window) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.in_h * g.in_w;
    let scale = 1.0 / (g.kh * g.kw) as f64;
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &input[p * plane..(p + 1) * plane];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = 0.0;
                for ki in 0..g.kh {
                    let row = (oi * g.stride.0 + ki) * g.in_w + oj * g.stride.1;
                    acc += src[row..row + g.kw].iter().sum::<f64>();
                }
                out.push(acc * scale);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(grad_out: &[f64], planes: usize, g: &Window) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.in_h * g.in_w;
    let scale = 1.0 / (g.kh * g.kw) as f64;
    let mut grad_in = vec![0.0; planes * plane];
    for p in 0..planes {
        let dst = &mut grad_in[p * plane..(p + 1) * plane];
        for oi in 0..oh {
            for oj in 0..ow {
                let d = grad_out[(p * oh + oi) * ow + oj] * scale;
                for ki in 0..g.kh {
                    let row = (oi * g.stride.0 + ki) * g.in_w + oj * g.stride.1;
                    for v in &mut dst[row..row + g.kw] {
                        *v += d;
                    }
                }
            }
        }
    }
    grad_in
}

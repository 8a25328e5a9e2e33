//! Raw numeric kernels used by the tape operations.
//!
//! All kernels work on flat row-major slices and accumulate (`+=`) into their
//! output where the name says `acc`, so backward passes can fan gradients into
//! a shared buffer. Loops are ordered so the inner dimension is contiguous.

/// c[i,j] += sum_l a[i,l] * b[l,j]; a is m*k, b is k*n, c is m*n.
pub fn matmul_nn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (c_ij, &b_lj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_il * b_lj;
            }
        }
    }
}

/// c[i,j] += sum_l a[i,l] * b[j,l]; a is m*k, b is n*k (i.e. B transposed).
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, c_ij) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *c_ij += acc;
        }
    }
}

/// c[i,j] += sum_l a[l,i] * b[l,j]; a is k*m (i.e. A transposed), b is k*n.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for l in 0..k {
        let a_row = &a[l * m..(l + 1) * m];
        let b_row = &b[l * n..(l + 1) * n];
        for (i, &a_li) in a_row.iter().enumerate() {
            if a_li == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_ij, &b_lj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_li * b_lj;
            }
        }
    }
}

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold x (cin,h,w) into cols (cin*kh*kw, oh*ow) with zero padding.
pub fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), cin * kh * kw * oh * ow);
    let mut row = 0;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let out_row = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                let mut o = 0;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        for _ in 0..ow {
                            out_row[o] = 0.0;
                            o += 1;
                        }
                        continue;
                    }
                    let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        out_row[o] = if ix < 0 || ix >= w as isize { 0.0 } else { line[ix as usize] };
                        o += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter cols (cin*kh*kw, oh*ow) back into dx (cin,h,w), accumulating.
pub fn col2im_acc(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), cin * kh * kw * oh * ow);
    debug_assert_eq!(dx.len(), cin * h * w);
    let mut row = 0;
    for c in 0..cin {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let col_row = &cols[row * oh * ow..(row + 1) * oh * ow];
                let mut o = 0;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        o += ow;
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += col_row[o];
                        }
                        o += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward max pooling; records the flat argmax index (first occurrence on
/// ties, scanning each window row-major) for the backward scatter.
pub fn maxpool_forward(
    x: &[f64],
    ch: usize,
    h: usize,
    w: usize,
    win: usize,
    stride: usize,
    out: &mut [f64],
    argmax: &mut Vec<usize>,
) {
    let oh = (h - win) / stride + 1;
    let ow = (w - win) / stride + 1;
    debug_assert_eq!(out.len(), ch * oh * ow);
    argmax.clear();
    argmax.reserve(ch * oh * ow);
    for c in 0..ch {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..win {
                    let iy = oy * stride + ky;
                    for kx in 0..win {
                        let ix = ox * stride + kx;
                        let v = plane[iy * w + ix];
                        if v > best {
                            best = v;
                            best_idx = iy * w + ix;
                        }
                    }
                }
                out[(c * oh + oy) * ow + ox] = best;
                argmax.push(c * h * w + best_idx);
            }
        }
    }
}

/// Softmax over lanes of length `len`, with `outer` lanes of stride
/// `len*inner` and `inner` interleaved lanes each. Max-subtracted for
/// stability.
pub fn softmax_lanes(x: &[f64], outer: usize, len: usize, inner: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), outer * len * inner);
    debug_assert_eq!(out.len(), x.len());
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let mut max = f64::NEG_INFINITY;
            for l in 0..len {
                max = max.max(x[base + l * inner + i]);
            }
            let mut sum = 0.0;
            for l in 0..len {
                let e = (x[base + l * inner + i] - max).exp();
                out[base + l * inner + i] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for l in 0..len {
                out[base + l * inner + i] *= inv;
            }
        }
    }
}

/// Bilinear weights for a point clamped to the map border.
///
/// Returns (x0, y0, wx, wy, in_x, in_y): the low corner, the fractional
/// weights toward the high corner, and whether the coordinate was strictly
/// inside the clamp range (position gradients vanish once clamped).
pub fn bilinear_setup(x: f64, y: f64, h: usize, w: usize) -> (usize, usize, f64, f64, bool, bool) {
    let (x0, wx, in_x) = axis_setup(x, w);
    let (y0, wy, in_y) = axis_setup(y, h);
    (x0, y0, wx, wy, in_x, in_y)
}

fn axis_setup(v: f64, dim: usize) -> (usize, f64, bool) {
    if dim == 1 {
        return (0, 0.0, false);
    }
    let max = (dim - 1) as f64;
    let inside = v >= 0.0 && v <= max;
    let vc = v.clamp(0.0, max);
    let mut lo = vc.floor();
    if lo > max - 1.0 {
        lo = max - 1.0;
    }
    (lo as usize, vc - lo, inside)
}

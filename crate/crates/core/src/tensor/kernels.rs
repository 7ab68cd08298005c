//! Raw numeric kernels over flat NCHW buffers. Shape validation happens in the
//! tape layer; these functions assume consistent extents.

use super::Element;

/// Row-major `c[m×n] = alpha·op(a)·op(b) + beta·c`.
///
/// `a_t` / `b_t` read `a` as k×m / `b` as n×k storage, i.e. transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: extents checked above; `c` is a distinct mutable slice.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
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
        )
    }
}

/// Output extent of a sliding window, or `None` when it is not a positive integer.
pub fn window_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || k == 0 || padded < k || !(padded - k).is_multiple_of(stride) {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding, bias added per output channel.
pub fn conv2d_forward<T: Element>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * g.out_plane();
    let mut out = vec![T::zero(); batch * out_img];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * g.out_plane()]
    };
    for b in 0..batch {
        let xb = &x[b * in_img..(b + 1) * in_img];
        let ob = &mut out[b * out_img..(b + 1) * out_img];
        for (c, chunk) in ob.chunks_mut(g.out_plane()).enumerate() {
            chunk.fill(bias[c]);
        }
        let rhs: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(
            g.cout,
            g.col_rows(),
            g.out_plane(),
            T::one(),
            weight,
            false,
            rhs,
            false,
            T::one(),
            ob,
        );
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    dout: &[T],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let in_img = g.cin * g.h * g.w;
    let plane = g.out_plane();
    let out_img = g.cout * plane;
    let rows = g.col_rows();
    let mut dx = want_input.then(|| vec![T::zero(); batch * in_img]);
    let mut dw = want_weight.then(|| vec![T::zero(); g.cout * rows]);
    let mut db = want_bias.then(|| vec![T::zero(); g.cout]);
    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { rows * plane }];
    let mut dcols = vec![
        T::zero();
        if pointwise || !want_input {
            0
        } else {
            rows * plane
        }
    ];

    for b in 0..batch {
        let xb = &x[b * in_img..(b + 1) * in_img];
        let gb = &dout[b * out_img..(b + 1) * out_img];
        if let Some(db) = db.as_mut() {
            for (c, chunk) in gb.chunks(plane).enumerate() {
                db[c] = db[c] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let rhs: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            // dW[cout×rows] += dout[cout×plane] · cols^T
            gemm(
                g.cout,
                plane,
                rows,
                T::one(),
                gb,
                false,
                rhs,
                true,
                T::one(),
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_img..(b + 1) * in_img];
            if pointwise {
                gemm(
                    rows,
                    g.cout,
                    plane,
                    T::one(),
                    weight,
                    true,
                    gb,
                    false,
                    T::zero(),
                    dxb,
                );
            } else {
                gemm(
                    rows,
                    g.cout,
                    plane,
                    T::one(),
                    weight,
                    true,
                    gb,
                    false,
                    T::zero(),
                    &mut dcols,
                );
                col2im(&dcols, g, dxb);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Max pooling without padding. Returns the pooled values and, per output,
/// the flat input index of the first (row-major) maximum in its window.
#[allow(clippy::too_many_arguments)]
pub fn maxpool_forward<T: Element>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> (Vec<T>, Vec<u32>) {
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = base + oy * stride * w + ox * stride;
                for ki in 0..k {
                    let row = base + (oy * stride + ki) * w + ox * stride;
                    for kj in 0..k {
                        let v = x[row + kj];
                        // strict comparison keeps the first maximum
                        if v > best {
                            best = v;
                            best_idx = row + kj;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

/// Source taps for half-pixel-center bilinear sampling along one axis:
/// `(i0, i1, weight of i1)` for every destination coordinate.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn upsample_forward<T: Element>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, wy) in &ty {
            let wy = T::from_f64_lossy(wy);
            for &(x0, x1, wx) in &tx {
                let wx = T::from_f64_lossy(wx);
                let top = src[y0 * w + x0] * (T::one() - wx) + src[y0 * w + x1] * wx;
                let bot = src[y1 * w + x0] * (T::one() - wx) + src[y1 * w + x1] * wx;
                out.push(top * (T::one() - wy) + bot * wy);
            }
        }
    }
    out
}

pub fn upsample_backward<T: Element>(
    dout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        for (yi, &(y0, y1, wy)) in ty.iter().enumerate() {
            let wy = T::from_f64_lossy(wy);
            for (xi, &(x0, x1, wx)) in tx.iter().enumerate() {
                let wx = T::from_f64_lossy(wx);
                let g = src[yi * ow + xi];
                let gt = g * (T::one() - wy);
                let gb = g * wy;
                dst[y0 * w + x0] = dst[y0 * w + x0] + gt * (T::one() - wx);
                dst[y0 * w + x1] = dst[y0 * w + x1] + gt * wx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + gb * (T::one() - wx);
                dst[y1 * w + x1] = dst[y1 * w + x1] + gb * wx;
            }
        }
    }
    dx
}

/// Per-channel population mean and variance over N·H·W.
pub fn channel_moments<T: Element>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(n * plane).expect("count fits");
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            s = s + x[base..base + plane].iter().copied().sum::<T>();
        }
        let mu = s / count;
        let mut v = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            v = v + x[base..base + plane]
                .iter()
                .map(|&e| (e - mu) * (e - mu))
                .sum::<T>();
        }
        mean[ch] = mu;
        var[ch] = v / count;
    }
    (mean, var)
}

/// `y = scale[c]·x + shift[c]`, channel-wise over an NCHW buffer.
pub fn channel_affine<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    plane: usize,
    scale: &[T],
    shift: &[T],
) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let (s, t) = (scale[ch], shift[ch]);
            out.extend(x[base..base + plane].iter().map(|&e| s * e + t));
        }
    }
    out
}

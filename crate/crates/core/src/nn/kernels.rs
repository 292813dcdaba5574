//! Per-item numeric kernels. The graph fans these out over the batch axis.

/// Geometry of a 2-d convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Window {
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        Window {
            kh: k,
            kw: k,
            stride,
            ph: pad,
            pw: pad,
        }
    }

    /// Output spatial size, or `None` when the window does not fit.
    pub fn output(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.ph;
        let wp = w + 2 * self.pw;
        if hp < self.kh || wp < self.kw || self.stride == 0 {
            return None;
        }
        Some(((hp - self.kh) / self.stride + 1, (wp - self.kw) / self.stride + 1))
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, with optional transposed storage.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
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

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub ho: usize,
    pub wo: usize,
    pub groups: usize,
    pub win: Window,
}

impl ConvDims {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn patch(&self) -> usize {
        self.cin_g() * self.win.kh * self.win.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.cin_g() == 1 && self.cout_g() == 1
    }
}

fn im2col(x: &[f32], d: &ConvDims, cols: &mut [f32]) {
    let Window { kh, kw, stride, ph, pw } = d.win;
    let p = d.positions();
    for ci in 0..d.cin_g() {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let out = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    let dst = &mut out[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy as usize >= d.h {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        *v = if ix < 0 || ix as usize >= d.w {
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

fn col2im_add(cols: &[f32], d: &ConvDims, dx: &mut [f32]) {
    let Window { kh, kw, stride, ph, pw } = d.win;
    let p = d.positions();
    for ci in 0..d.cin_g() {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    let base = iy as usize * d.w;
                    for ox in 0..d.wo {
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            plane[base + ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of one batch item.
pub fn conv_forward(x: &[f32], weight: &[f32], bias: Option<&[f32]>, d: &ConvDims, out: &mut [f32]) {
    let p = d.positions();
    if d.is_depthwise() {
        depthwise_forward(x, weight, d, out);
    } else {
        let k = d.patch();
        let mut cols = vec![0.0f32; k * p];
        let cout_g = d.cout_g();
        for g in 0..d.groups {
            let xg = &x[g * d.cin_g() * d.h * d.w..];
            im2col(xg, d, &mut cols);
            let wg = &weight[g * cout_g * k..(g + 1) * cout_g * k];
            let og = &mut out[g * cout_g * p..(g + 1) * cout_g * p];
            gemm(cout_g, k, p, wg, false, &cols, false, og, 0.0);
        }
    }
    if let Some(b) = bias {
        for (co, bv) in b.iter().enumerate() {
            out[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// Gradients of one batch item: `(dx, dweight, dbias)`.
pub fn conv_backward(
    x: &[f32],
    weight: &[f32],
    dout: &[f32],
    d: &ConvDims,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Vec<f32>) {
    let p = d.positions();
    let db: Vec<f32> = (0..d.cout).map(|co| dout[co * p..(co + 1) * p].iter().sum()).collect();
    if d.is_depthwise() {
        let (dx, dw) = depthwise_backward(x, weight, dout, d, want_dx, want_dw);
        return (dx, dw, db);
    }
    let k = d.patch();
    let cout_g = d.cout_g();
    let mut cols = vec![0.0f32; k * p];
    let mut dx = want_dx.then(|| vec![0.0f32; d.cin * d.h * d.w]);
    let mut dw = want_dw.then(|| vec![0.0f32; weight.len()]);
    for g in 0..d.groups {
        let dout_g = &dout[g * cout_g * p..(g + 1) * cout_g * p];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[g * d.cin_g() * d.h * d.w..], d, &mut cols);
            let dwg = &mut dw[g * cout_g * k..(g + 1) * cout_g * k];
            gemm(cout_g, p, k, dout_g, false, &cols, true, dwg, 0.0);
        }
        if let Some(dx) = dx.as_mut() {
            let wg = &weight[g * cout_g * k..(g + 1) * cout_g * k];
            gemm(k, cout_g, p, wg, true, dout_g, false, &mut cols, 0.0);
            let off = g * d.cin_g() * d.h * d.w;
            col2im_add(&cols, d, &mut dx[off..off + d.cin_g() * d.h * d.w]);
        }
    }
    (dx, dw, db)
}

fn depthwise_forward(x: &[f32], weight: &[f32], d: &ConvDims, out: &mut [f32]) {
    let Window { kh, kw, stride, ph, pw } = d.win;
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        let ker = &weight[c * kh * kw..(c + 1) * kh * kw];
        let o = &mut out[c * d.ho * d.wo..(c + 1) * d.ho * d.wo];
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let mut acc = 0.0f32;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    let row = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            acc += row[ix as usize] * ker[ky * kw + kx];
                        }
                    }
                }
                o[oy * d.wo + ox] = acc;
            }
        }
    }
}

fn depthwise_backward(
    x: &[f32],
    weight: &[f32],
    dout: &[f32],
    d: &ConvDims,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let Window { kh, kw, stride, ph, pw } = d.win;
    let mut dx = want_dx.then(|| vec![0.0f32; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0f32; weight.len()]);
    for c in 0..d.cin {
        let plane = c * d.h * d.w;
        let ker = c * kh * kw;
        let go = &dout[c * d.ho * d.wo..(c + 1) * d.ho * d.wo];
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let g = go[oy * d.wo + ox];
                if g == 0.0 {
                    continue;
                }
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        if ix < 0 || ix as usize >= d.w {
                            continue;
                        }
                        let xi = plane + iy as usize * d.w + ix as usize;
                        let wi = ker + ky * kw + kx;
                        if let Some(dx) = dx.as_mut() {
                            dx[xi] += g * weight[wi];
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[wi] += g * x[xi];
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Max pooling over one `h×w` plane; returns the flat argmax of every output.
pub fn max_pool_plane(x: &[f32], h: usize, w: usize, win: &Window, out: &mut [f32]) -> Vec<u32> {
    let (ho, wo) = win.output(h, w).expect("pool window validated by graph");
    let mut arg = vec![0u32; ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            let mut best = f32::NEG_INFINITY;
            let mut best_i = 0usize;
            for ky in 0..win.kh {
                let iy = (oy * win.stride + ky) as isize - win.ph as isize;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..win.kw {
                    let ix = (ox * win.stride + kx) as isize - win.pw as isize;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let i = iy as usize * w + ix as usize;
                    if x[i] > best {
                        best = x[i];
                        best_i = i;
                    }
                }
            }
            out[oy * wo + ox] = best;
            arg[oy * wo + ox] = best_i as u32;
        }
    }
    arg
}

/// Average pooling over one plane; padded cells are excluded from the count.
pub fn avg_pool_plane(x: &[f32], h: usize, w: usize, win: &Window, out: &mut [f32]) {
    let (ho, wo) = win.output(h, w).expect("pool window validated by graph");
    for oy in 0..ho {
        for ox in 0..wo {
            let mut acc = 0.0f32;
            let mut count = 0usize;
            for_window(oy, ox, h, w, win, |i| {
                acc += x[i];
                count += 1;
            });
            out[oy * wo + ox] = if count > 0 { acc / count as f32 } else { 0.0 };
        }
    }
}

pub fn avg_pool_plane_backward(dout: &[f32], h: usize, w: usize, win: &Window, dx: &mut [f32]) {
    let (ho, wo) = win.output(h, w).expect("pool window validated by graph");
    for oy in 0..ho {
        for ox in 0..wo {
            let mut count = 0usize;
            for_window(oy, ox, h, w, win, |_| count += 1);
            if count == 0 {
                continue;
            }
            let g = dout[oy * wo + ox] / count as f32;
            for_window(oy, ox, h, w, win, |i| dx[i] += g);
        }
    }
}

fn for_window(oy: usize, ox: usize, h: usize, w: usize, win: &Window, mut f: impl FnMut(usize)) {
    for ky in 0..win.kh {
        let iy = (oy * win.stride + ky) as isize - win.ph as isize;
        if iy < 0 || iy as usize >= h {
            continue;
        }
        for kx in 0..win.kw {
            let ix = (ox * win.stride + kx) as isize - win.pw as isize;
            if ix >= 0 && (ix as usize) < w {
                f(iy as usize * w + ix as usize);
            }
        }
    }
}

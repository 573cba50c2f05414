//! Raw NCHW kernels. Shapes are validated by the tape before these run.

/// `c = a·b + beta·c` for row-major operands, with optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are checked above.
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

/// Optional gradients for (input, weight, bias).
pub(crate) type ConvGrads = (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let (ho, wo) = (self.ho, self.wo);
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        let dst = &mut col[row + oy * wo..row + (oy + 1) * wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
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

    fn col2im(&self, col: &[f32], gx: &mut [f32]) {
        let (ho, wo) = (self.ho, self.wo);
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                gx[base + ix as usize] += col[row + oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
        let (k, p) = (self.patch(), self.pixels());
        let in_sz = self.cin * self.h * self.w;
        let out_sz = self.cout * p;
        let mut out = vec![0.0; self.n * out_sz];
        let mut col = vec![0.0; if self.is_pointwise() { 0 } else { k * p }];
        for s in 0..self.n {
            let xs = &x[s * in_sz..(s + 1) * in_sz];
            let os = &mut out[s * out_sz..(s + 1) * out_sz];
            let cols: &[f32] = if self.is_pointwise() {
                xs
            } else {
                self.im2col(xs, &mut col);
                &col
            };
            gemm(self.cout, k, p, weight, false, cols, false, 0.0, os);
            if let Some(b) = bias {
                for (co, &bv) in b.iter().enumerate() {
                    for v in &mut os[co * p..(co + 1) * p] {
                        *v += bv;
                    }
                }
            }
        }
        out
    }

    /// Returns (grad input, grad weight, grad bias) for the requested parts.
    pub fn backward(
        &self,
        x: &[f32],
        weight: &[f32],
        gout: &[f32],
        want_x: bool,
        want_w: bool,
        want_b: bool,
    ) -> ConvGrads {
        let (k, p) = (self.patch(), self.pixels());
        let in_sz = self.cin * self.h * self.w;
        let out_sz = self.cout * p;
        let mut gx = want_x.then(|| vec![0.0; self.n * in_sz]);
        let mut gw = want_w.then(|| vec![0.0; self.cout * k]);
        let mut gb = want_b.then(|| vec![0.0; self.cout]);
        let mut col = vec![0.0; k * p];
        for s in 0..self.n {
            let gs = &gout[s * out_sz..(s + 1) * out_sz];
            if let Some(gw) = gw.as_mut() {
                let xs = &x[s * in_sz..(s + 1) * in_sz];
                let cols: &[f32] = if self.is_pointwise() {
                    xs
                } else {
                    self.im2col(xs, &mut col);
                    &col
                };
                gemm(self.cout, p, k, gs, false, cols, true, 1.0, gw);
            }
            if let Some(gb) = gb.as_mut() {
                for (co, g) in gb.iter_mut().enumerate() {
                    *g += gs[co * p..(co + 1) * p].iter().sum::<f32>();
                }
            }
            if let Some(gx) = gx.as_mut() {
                let gxs = &mut gx[s * in_sz..(s + 1) * in_sz];
                if self.is_pointwise() {
                    gemm(k, self.cout, p, weight, true, gs, false, 1.0, gxs);
                } else {
                    gemm(k, self.cout, p, weight, true, gs, false, 0.0, &mut col);
                    self.col2im(&col, gxs);
                }
            }
        }
        (gx, gw, gb)
    }
}

/// Depthwise convolution geometry: `cin == cout`, one kh×kw filter per channel.
pub(crate) struct Depthwise(pub Conv);

impl Depthwise {
    fn taps(&self, oy: usize, ox: usize) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let g = &self.0;
        (0..g.kh).flat_map(move |i| {
            (0..g.kw).filter_map(move |j| {
                let iy = (oy * g.stride + i) as isize - g.pad as isize;
                let ix = (ox * g.stride + j) as isize - g.pad as isize;
                (iy >= 0 && iy < g.h as isize && ix >= 0 && ix < g.w as isize)
                    .then(|| (i * g.kw + j, iy as usize, ix as usize))
            })
        })
    }

    pub fn forward(&self, x: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
        let g = &self.0;
        let mut out = vec![0.0; g.n * g.cout * g.ho * g.wo];
        let kk = g.kh * g.kw;
        for s in 0..g.n {
            for c in 0..g.cin {
                let xc = &x[(s * g.cin + c) * g.h * g.w..][..g.h * g.w];
                let wc = &weight[c * kk..(c + 1) * kk];
                let oc = &mut out[(s * g.cin + c) * g.ho * g.wo..][..g.ho * g.wo];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = bias.map_or(0.0, |b| b[c]);
                        for (t, iy, ix) in self.taps(oy, ox) {
                            acc += wc[t] * xc[iy * g.w + ix];
                        }
                        oc[oy * g.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    pub fn backward(
        &self,
        x: &[f32],
        weight: &[f32],
        gout: &[f32],
    ) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let g = &self.0;
        let kk = g.kh * g.kw;
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; weight.len()];
        let mut gb = vec![0.0; g.cin];
        for s in 0..g.n {
            for c in 0..g.cin {
                let base_in = (s * g.cin + c) * g.h * g.w;
                let base_out = (s * g.cin + c) * g.ho * g.wo;
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let go = gout[base_out + oy * g.wo + ox];
                        gb[c] += go;
                        for (t, iy, ix) in self.taps(oy, ox) {
                            gw[c * kk + t] += go * x[base_in + iy * g.w + ix];
                            gx[base_in + iy * g.w + ix] += go * weight[c * kk + t];
                        }
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Pool {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Pool {
    /// Max pooling; padded positions never win. Returns values and the flat
    /// input index of each winner (first maximum in scan order).
    pub fn max_forward(&self, x: &[f32]) -> (Vec<f32>, Vec<u32>) {
        let mut out = Vec::with_capacity(self.n * self.c * self.ho * self.wo);
        let mut arg = Vec::with_capacity(out.capacity());
        for plane in 0..self.n * self.c {
            let base = plane * self.h * self.w;
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for i in 0..self.k {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for j in 0..self.k {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * self.w + ix as usize;
                            if best_i == usize::MAX || x[idx] > best {
                                best = x[idx];
                                best_i = idx;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
        (out, arg)
    }

    /// Average pooling without padding.
    pub fn avg_forward(&self, x: &[f32]) -> Vec<f32> {
        let inv = 1.0 / (self.k * self.k) as f32;
        let mut out = Vec::with_capacity(self.n * self.c * self.ho * self.wo);
        for plane in 0..self.n * self.c {
            let base = plane * self.h * self.w;
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let mut acc = 0.0;
                    for i in 0..self.k {
                        let row = base + (oy * self.stride + i) * self.w + ox * self.stride;
                        for v in &x[row..row + self.k] {
                            acc += *v;
                        }
                    }
                    out.push(acc * inv);
                }
            }
        }
        out
    }

    pub fn avg_backward(&self, gout: &[f32]) -> Vec<f32> {
        let inv = 1.0 / (self.k * self.k) as f32;
        let mut gx = vec![0.0; self.n * self.c * self.h * self.w];
        let mut it = gout.iter();
        for plane in 0..self.n * self.c {
            let base = plane * self.h * self.w;
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let g = *it.next().unwrap() * inv;
                    for i in 0..self.k {
                        let row = base + (oy * self.stride + i) * self.w + ox * self.stride;
                        for v in &mut gx[row..row + self.k] {
                            *v += g;
                        }
                    }
                }
            }
        }
        gx
    }
}

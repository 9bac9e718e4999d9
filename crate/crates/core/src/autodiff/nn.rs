//! Convolutional network building blocks on the tape.
//!
//! All backward passes are written gather-style: each thread computes one
//! output slot by reading shared inputs, so gradients are deterministic for
//! any thread count.

use super::{par_rows, Tape, Tensor, Var};
use crate::Real;

impl<S: Real> Tape<S> {
    /// 2-d convolution, zero padding. `x`: [CI,H,W], `w`: [CO,CI,KH,KW],
    /// `b`: [CO].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (ci, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape.clone();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], ci, "weight input channels mismatch");
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        assert_eq!(self.value(b).shape, vec![co]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let value = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad, oh, ow);
        self.op(
            &[x, w, b],
            value,
            Box::new(move |vals, g, store| {
                let vx = vals.get(x.id);
                let vw = vals.get(w.id);
                store.accumulate(x.id, conv2d_backward_input(vw, g, ci, h, wd, stride, pad));
                store.accumulate(w.id, conv2d_backward_weight(vx, g, &[co, ci, kh, kw], stride, pad));
                store.accumulate(b.id, conv2d_backward_bias(g));
            }),
        )
    }

    /// Nearest-neighbor 2x upsampling of a CHW tensor.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let (oh, ow) = (h * 2, w * 2);
        let mut value = Tensor::zeros(vec![c, oh, ow]);
        {
            let src = self.value(x).data.clone();
            par_rows(&mut value, ow, move |row_idx, out_row| {
                let ch = row_idx / oh;
                let oy = row_idx % oh;
                let iy = oy / 2;
                for (ox, slot) in out_row.iter_mut().enumerate() {
                    *slot = src[(ch * h + iy) * w + ox / 2];
                }
            });
        }
        self.op(
            &[x],
            value,
            Box::new(move |_, g, store| {
                let mut dx = Tensor::zeros(vec![c, h, w]);
                let gd = &g.data;
                par_rows(&mut dx, w, |row_idx, out_row| {
                    let ch = row_idx / h;
                    let iy = row_idx % h;
                    for (ix, slot) in out_row.iter_mut().enumerate() {
                        let mut acc = S::zero();
                        for dy in 0..2 {
                            for dx2 in 0..2 {
                                acc += gd[(ch * oh + iy * 2 + dy) * ow + ix * 2 + dx2];
                            }
                        }
                        *slot = acc;
                    }
                });
                store.accumulate(x.id, dx);
            }),
        )
    }

    /// Concatenate CHW tensors along the channel axis.
    pub fn concat_c(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let (_, h, w) = self.value(xs[0]).chw();
        let mut channels = Vec::with_capacity(xs.len());
        for &v in xs {
            let (c, vh, vw) = self.value(v).chw();
            assert_eq!((vh, vw), (h, w), "concat spatial mismatch");
            channels.push(c);
        }
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(total * h * w);
        for &v in xs {
            data.extend_from_slice(&self.value(v).data);
        }
        let parents: Vec<Var> = xs.to_vec();
        let ids: Vec<usize> = xs.iter().map(|v| v.id).collect();
        self.op(
            &parents,
            Tensor::new(vec![total, h, w], data),
            Box::new(move |_, g, store| {
                let mut offset = 0;
                for (&id, &c) in ids.iter().zip(&channels) {
                    let n = c * h * w;
                    let slice = Tensor::new(vec![c, h, w], g.data[offset..offset + n].to_vec());
                    store.accumulate(id, slice);
                    offset += n;
                }
            }),
        )
    }

    /// Spatial mean per channel: [C,H,W] -> [C].
    pub fn global_mean(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let n = h * w;
        let scale = S::lit(1.0 / n as f64);
        let data: Vec<S> = (0..c)
            .map(|ch| {
                self.value(x).data[ch * n..(ch + 1) * n]
                    .iter()
                    .fold(S::zero(), |a, &b| a + b)
                    * scale
            })
            .collect();
        self.op(
            &[x],
            Tensor::new(vec![c], data),
            Box::new(move |_, g, store| {
                let mut dx = Tensor::zeros(vec![c, h, w]);
                for ch in 0..c {
                    let gv = g.data[ch] * scale;
                    for slot in &mut dx.data[ch * n..(ch + 1) * n] {
                        *slot = gv;
                    }
                }
                store.accumulate(x.id, dx);
            }),
        )
    }

    /// 3x3 box mean with count normalization at the borders (each output is
    /// the mean over its in-bounds neighbors).
    pub fn box_mean3(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let value = box_mean3_apply(self.value(x));
        self.op(
            &[x],
            value,
            Box::new(move |_, g, store| {
                debug_assert_eq!(g.shape, vec![c, h, w]);
                store.accumulate(x.id, box_mean3_adjoint(g));
            }),
        )
    }

    /// Horizontal forward difference: [C,H,W] -> [C,H,W-1].
    pub fn diff_x(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let src = self.value(x);
        let mut value = Tensor::zeros(vec![c, h, w - 1]);
        for ch in 0..c {
            for y in 0..h {
                for ix in 0..w - 1 {
                    value.data[(ch * h + y) * (w - 1) + ix] =
                        src.data[(ch * h + y) * w + ix + 1] - src.data[(ch * h + y) * w + ix];
                }
            }
        }
        self.op(
            &[x],
            value,
            Box::new(move |_, g, store| {
                let mut dx = Tensor::zeros(vec![c, h, w]);
                for ch in 0..c {
                    for y in 0..h {
                        for ix in 0..w - 1 {
                            let gv = g.data[(ch * h + y) * (w - 1) + ix];
                            dx.data[(ch * h + y) * w + ix + 1] += gv;
                            dx.data[(ch * h + y) * w + ix] -= gv;
                        }
                    }
                }
                store.accumulate(x.id, dx);
            }),
        )
    }

    /// Vertical forward difference: [C,H,W] -> [C,H-1,W].
    pub fn diff_y(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let src = self.value(x);
        let mut value = Tensor::zeros(vec![c, h - 1, w]);
        for ch in 0..c {
            for y in 0..h - 1 {
                for ix in 0..w {
                    value.data[(ch * (h - 1) + y) * w + ix] =
                        src.data[(ch * h + y + 1) * w + ix] - src.data[(ch * h + y) * w + ix];
                }
            }
        }
        self.op(
            &[x],
            value,
            Box::new(move |_, g, store| {
                let mut dx = Tensor::zeros(vec![c, h, w]);
                for ch in 0..c {
                    for y in 0..h - 1 {
                        for ix in 0..w {
                            let gv = g.data[(ch * (h - 1) + y) * w + ix];
                            dx.data[(ch * h + y + 1) * w + ix] += gv;
                            dx.data[(ch * h + y) * w + ix] -= gv;
                        }
                    }
                }
                store.accumulate(x.id, dx);
            }),
        )
    }

    /// Mean over channels: [C,H,W] -> [1,H,W].
    pub fn mean_c(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let n = h * w;
        let scale = S::lit(1.0 / c as f64);
        let src = self.value(x);
        let mut value = Tensor::zeros(vec![1, h, w]);
        for ch in 0..c {
            for i in 0..n {
                value.data[i] += src.data[ch * n + i] * scale;
            }
        }
        self.op(
            &[x],
            value,
            Box::new(move |_, g, store| {
                let mut dx = Tensor::zeros(vec![c, h, w]);
                for ch in 0..c {
                    for i in 0..n {
                        dx.data[ch * n + i] = g.data[i] * scale;
                    }
                }
                store.accumulate(x.id, dx);
            }),
        )
    }

    /// Normalize the channel vector at each pixel to unit length (with a
    /// tiny epsilon under the square root).
    pub fn normalize_pixels(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let n = h * w;
        let eps = S::lit(1e-12);
        let src = self.value(x).data.clone();
        let mut value = Tensor::zeros(vec![c, h, w]);
        for i in 0..n {
            let mut sq = eps;
            for ch in 0..c {
                let v = src[ch * n + i];
                sq += v * v;
            }
            let inv = S::one() / nalgebra::ComplexField::sqrt(sq);
            for ch in 0..c {
                value.data[ch * n + i] = src[ch * n + i] * inv;
            }
        }
        self.op(
            &[x],
            value,
            Box::new(move |vals, g, store| {
                let src = &vals.get(x.id).data;
                let mut dx = Tensor::zeros(vec![c, h, w]);
                for i in 0..n {
                    let mut sq = eps;
                    for ch in 0..c {
                        let v = src[ch * n + i];
                        sq += v * v;
                    }
                    let norm = nalgebra::ComplexField::sqrt(sq);
                    let inv = S::one() / norm;
                    // y = x/|x|; dx = (g - y (y·g)) / |x|
                    let mut dot = S::zero();
                    for ch in 0..c {
                        dot += src[ch * n + i] * inv * g.data[ch * n + i];
                    }
                    for ch in 0..c {
                        let y = src[ch * n + i] * inv;
                        dx.data[ch * n + i] = (g.data[ch * n + i] - y * dot) * inv;
                    }
                }
                store.accumulate(x.id, dx);
            }),
        )
    }

    /// Reorder [C,H,W] into a per-pixel attribute matrix [H*W, C]
    /// (row-major pixel order).
    pub fn chw_to_mc(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let n = h * w;
        let src = self.value(x);
        let mut value = Tensor::zeros(vec![n, c]);
        for i in 0..n {
            for ch in 0..c {
                value.data[i * c + ch] = src.data[ch * n + i];
            }
        }
        self.op(
            &[x],
            value,
            Box::new(move |_, g, store| {
                let mut dx = Tensor::zeros(vec![c, h, w]);
                for i in 0..n {
                    for ch in 0..c {
                        dx.data[ch * n + i] = g.data[i * c + ch];
                    }
                }
                store.accumulate(x.id, dx);
            }),
        )
    }
}

fn conv2d_forward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor<S> {
    let (ci, h, wd) = x.chw();
    let (co, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
    let mut out = Tensor::zeros(vec![co, oh, ow]);
    let xd = &x.data;
    let wdat = &w.data;
    let bd = &b.data;
    par_rows(&mut out, ow, |row_idx, out_row| {
        let oc = row_idx / oh;
        let oy = row_idx % oh;
        for slot in out_row.iter_mut() {
            *slot = bd[oc];
        }
        for ic in 0..ci {
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let x_row = &xd[(ic * h + iy as usize) * wd..(ic * h + iy as usize + 1) * wd];
                let w_row = &wdat[((oc * ci + ic) * kh + ky) * kw..((oc * ci + ic) * kh + ky + 1) * kw];
                for (kx, &wv) in w_row.iter().enumerate() {
                    // Valid output range: 0 <= ox*stride + kx - pad < wd.
                    let lo = pad.saturating_sub(kx).div_ceil(stride);
                    let hi_excl = ((wd + pad - kx).saturating_sub(1) / stride + 1).min(ow);
                    if lo >= hi_excl {
                        continue;
                    }
                    let base = lo * stride + kx - pad;
                    if stride == 1 {
                        let src = &x_row[base..base + (hi_excl - lo)];
                        for (o, &xv) in out_row[lo..hi_excl].iter_mut().zip(src) {
                            *o += wv * xv;
                        }
                    } else {
                        let mut ix = base;
                        for o in out_row[lo..hi_excl].iter_mut() {
                            *o += wv * x_row[ix];
                            ix += stride;
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv2d_backward_input<S: Real>(
    w: &Tensor<S>,
    g: &Tensor<S>,
    ci: usize,
    h: usize,
    wd: usize,
    stride: usize,
    pad: usize,
) -> Tensor<S> {
    let (co, oh, ow) = g.chw();
    let (kh, kw) = (w.shape[2], w.shape[3]);
    let mut dx = Tensor::zeros(vec![ci, h, wd]);
    let gd = &g.data;
    let wdat = &w.data;
    par_rows(&mut dx, wd, |row_idx, out_row| {
        let ic = row_idx / h;
        let iy = row_idx % h;
        for oc in 0..co {
            for ky in 0..kh {
                // iy = oy*stride + ky - pad  =>  oy = (iy + pad - ky)/stride.
                let oy_num = iy as isize + pad as isize - ky as isize;
                if oy_num < 0 || oy_num % stride as isize != 0 {
                    continue;
                }
                let oy = (oy_num / stride as isize) as usize;
                if oy >= oh {
                    continue;
                }
                let g_row = &gd[(oc * oh + oy) * ow..(oc * oh + oy + 1) * ow];
                let w_row = &wdat[((oc * ci + ic) * kh + ky) * kw..((oc * ci + ic) * kh + ky + 1) * kw];
                for (kx, &wv) in w_row.iter().enumerate() {
                    // ix = ox*stride + kx - pad over valid ox.
                    let lo = pad.saturating_sub(kx).div_ceil(stride);
                    let hi_excl = ((wd + pad - kx).saturating_sub(1) / stride + 1).min(ow);
                    if lo >= hi_excl {
                        continue;
                    }
                    if stride == 1 {
                        let base = lo + kx - pad;
                        for (o, &gv) in out_row[base..base + (hi_excl - lo)].iter_mut().zip(&g_row[lo..hi_excl]) {
                            *o += wv * gv;
                        }
                    } else {
                        let mut ix = lo * stride + kx - pad;
                        for &gv in &g_row[lo..hi_excl] {
                            out_row[ix] += wv * gv;
                            ix += stride;
                        }
                    }
                }
            }
        }
    });
    dx
}

fn conv2d_backward_weight<S: Real>(
    x: &Tensor<S>,
    g: &Tensor<S>,
    wshape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor<S> {
    let (ci, h, wd) = x.chw();
    let (_, oh, ow) = g.chw();
    let (kh, kw) = (wshape[2], wshape[3]);
    let mut dw = Tensor::zeros(wshape.to_vec());
    let xd = &x.data;
    let gd = &g.data;
    // One task per (oc, ic) filter plane.
    par_rows(&mut dw, kh * kw, |plane, out_plane| {
        let oc = plane / ci;
        let ic = plane % ci;
        for ky in 0..kh {
            for kx in 0..kw {
                let lo = pad.saturating_sub(kx).div_ceil(stride);
                let hi_excl = ((wd + pad - kx).saturating_sub(1) / stride + 1).min(ow);
                let mut acc = S::zero();
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_row = &xd[(ic * h + iy as usize) * wd..(ic * h + iy as usize + 1) * wd];
                    let g_row = &gd[(oc * oh + oy) * ow..(oc * oh + oy + 1) * ow];
                    if lo >= hi_excl {
                        continue;
                    }
                    if stride == 1 {
                        let base = lo + kx - pad;
                        for (&xv, &gv) in x_row[base..base + (hi_excl - lo)].iter().zip(&g_row[lo..hi_excl]) {
                            acc += xv * gv;
                        }
                    } else {
                        let mut ix = lo * stride + kx - pad;
                        for &gv in &g_row[lo..hi_excl] {
                            acc += x_row[ix] * gv;
                            ix += stride;
                        }
                    }
                }
                out_plane[ky * kw + kx] = acc;
            }
        }
    });
    dw
}

fn conv2d_backward_bias<S: Real>(g: &Tensor<S>) -> Tensor<S> {
    let (co, oh, ow) = g.chw();
    let data: Vec<S> = (0..co)
        .map(|oc| {
            g.data[oc * oh * ow..(oc + 1) * oh * ow]
                .iter()
                .fold(S::zero(), |a, &b| a + b)
        })
        .collect();
    Tensor::new(vec![co], data)
}

fn window_count(y: usize, x: usize, h: usize, w: usize) -> usize {
    let ys = if y == 0 || y == h - 1 { 2 } else { 3 };
    let xs = if x == 0 || x == w - 1 { 2 } else { 3 };
    ys.min(h) * xs.min(w)
}

fn box_mean3_apply<S: Real>(x: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = x.chw();
    let mut out = Tensor::zeros(vec![c, h, w]);
    let xd = &x.data;
    par_rows(&mut out, w, |row_idx, out_row| {
        let ch = row_idx / h;
        let y = row_idx % h;
        for (x0, slot) in out_row.iter_mut().enumerate() {
            let mut acc = S::zero();
            for dy in -1isize..=1 {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -1isize..=1 {
                    let xx = x0 as isize + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += xd[(ch * h + yy as usize) * w + xx as usize];
                }
            }
            *slot = acc / S::lit(window_count(y, x0, h, w) as f64);
        }
    });
    out
}

/// Adjoint of `box_mean3_apply`: gather neighbor gradients weighted by the
/// neighbor's own window count.
fn box_mean3_adjoint<S: Real>(g: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = g.chw();
    let mut out = Tensor::zeros(vec![c, h, w]);
    let gd = &g.data;
    par_rows(&mut out, w, |row_idx, out_row| {
        let ch = row_idx / h;
        let y = row_idx % h;
        for (x0, slot) in out_row.iter_mut().enumerate() {
            let mut acc = S::zero();
            for dy in -1isize..=1 {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -1isize..=1 {
                    let xx = x0 as isize + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += gd[(ch * h + yy as usize) * w + xx as usize]
                        / S::lit(window_count(yy as usize, xx as usize, h, w) as f64);
                }
            }
            *slot = acc;
        }
    });
    out
}

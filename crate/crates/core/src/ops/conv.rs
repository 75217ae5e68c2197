use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Real, Tensor, Trans};

/// Stride, zero padding and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub const UNIT: ConvGeom = ConvGeom { stride: 1, pad: 0, groups: 1 };

    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        ConvGeom { stride, pad, groups }
    }

    fn out_size(&self, input: usize, k: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        (padded >= k && self.stride > 0).then(|| (padded - k) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Dims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeom,
}

impl Dims {
    fn cin_g(&self) -> usize {
        self.cin / self.geom.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.geom.groups
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom.stride == 1 && self.geom.pad == 0
    }
    fn is_depthwise(&self) -> bool {
        self.geom.groups == self.cin && self.cout == self.cin && self.geom.groups > 1
    }
}

fn dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>, geom: ConvGeom) -> Result<Dims> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, cin_g, kh, kw) = w.dims4()?;
    if geom.groups == 0 || cin % geom.groups != 0 || cout % geom.groups != 0 || cin / geom.groups != cin_g {
        return Err(shape_err(
            "conv2d",
            alloc::format!("input {:?} weight {:?} groups {}", x.shape(), w.shape(), geom.groups),
        ));
    }
    let ho = geom.out_size(h, kh).ok_or_else(|| shape_err("conv2d", "kernel larger than padded input"))?;
    let wo = geom.out_size(wd, kw).ok_or_else(|| shape_err("conv2d", "kernel larger than padded input"))?;
    Ok(Dims { n, cin, h, w: wd, cout, kh, kw, ho, wo, geom })
}

/// Unfolds one group of one image into a `[c·kh·kw, ho·wo]` column matrix.
fn im2col<T: Real>(x: &[T], c: usize, d: &Dims, cols: &mut [T]) {
    let (h, w, ho, wo) = (d.h as isize, d.w as isize, d.ho, d.wo);
    let (s, p) = (d.geom.stride as isize, d.geom.pad as isize);
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = oy as isize * s + ki as isize - p;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize - p;
                        *v = if ix < 0 || ix >= w { T::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back, accumulating into one group of one image.
fn col2im<T: Real>(cols: &[T], c: usize, d: &Dims, x: &mut [T]) {
    let (h, w, ho, wo) = (d.h as isize, d.w as isize, d.ho, d.wo);
    let (s, p) = (d.geom.stride as isize, d.geom.pad as isize);
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = oy as isize * s + ki as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = ox as isize * s + kj as isize - p;
                        if ix >= 0 && ix < w {
                            dst_row[ix as usize] = dst_row[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Valid output column range `[lo, hi)` for kernel column `kj` (input index `ox*s + kj - p`).
fn valid_range(len_in: usize, len_out: usize, s: usize, k_off: usize, p: usize) -> (usize, usize) {
    let mut lo = 0;
    while lo < len_out && (lo * s + k_off) < p {
        lo += 1;
    }
    let mut hi = len_out;
    while hi > lo && ((hi - 1) * s + k_off) >= p + len_in {
        hi -= 1;
    }
    (lo, hi)
}

fn depthwise_forward<T: Real>(x: &[T], w: &[T], d: &Dims, out: &mut [T]) {
    let (s, p) = (d.geom.stride, d.geom.pad);
    let (hw_in, hw_out, kk) = (d.h * d.w, d.ho * d.wo, d.kh * d.kw);
    for n in 0..d.n {
        for c in 0..d.cin {
            let src = &x[(n * d.cin + c) * hw_in..][..hw_in];
            let dst = &mut out[(n * d.cout + c) * hw_out..][..hw_out];
            let wk = &w[c * kk..(c + 1) * kk];
            for ki in 0..d.kh {
                let (y0, y1) = valid_range(d.h, d.ho, s, ki, p);
                for kj in 0..d.kw {
                    let wv = wk[ki * d.kw + kj];
                    let (x0, x1) = valid_range(d.w, d.wo, s, kj, p);
                    for oy in y0..y1 {
                        let iy = oy * s + ki - p;
                        let orow = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                        let irow = &src[iy * d.w..(iy + 1) * d.w];
                        if s == 1 {
                            let ioff = x0 + kj - p;
                            for (o, &i) in orow[x0..x1].iter_mut().zip(&irow[ioff..ioff + (x1 - x0)]) {
                                *o = *o + wv * i;
                            }
                        } else {
                            for ox in x0..x1 {
                                orow[ox] = orow[ox] + wv * irow[ox * s + kj - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    d: &Dims,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let (s, p) = (d.geom.stride, d.geom.pad);
    let (hw_in, hw_out, kk) = (d.h * d.w, d.ho * d.wo, d.kh * d.kw);
    let mut dx = dx;
    let mut dw = dw;
    for n in 0..d.n {
        for c in 0..d.cin {
            let src = &x[(n * d.cin + c) * hw_in..][..hw_in];
            let g = &dy[(n * d.cout + c) * hw_out..][..hw_out];
            for ki in 0..d.kh {
                let (y0, y1) = valid_range(d.h, d.ho, s, ki, p);
                for kj in 0..d.kw {
                    let wv = w[c * kk + ki * d.kw + kj];
                    let (x0, x1) = valid_range(d.w, d.wo, s, kj, p);
                    let mut acc = T::zero();
                    for oy in y0..y1 {
                        let iy = oy * s + ki - p;
                        let grow = &g[oy * d.wo..(oy + 1) * d.wo];
                        let irow = &src[iy * d.w..(iy + 1) * d.w];
                        for ox in x0..x1 {
                            acc = acc + grow[ox] * irow[ox * s + kj - p];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let drow = &mut dx[(n * d.cin + c) * hw_in + iy * d.w..][..d.w];
                            for ox in x0..x1 {
                                let ix = ox * s + kj - p;
                                drow[ix] = drow[ix] + wv * grow[ox];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[c * kk + ki * d.kw + kj] = dw[c * kk + ki * d.kw + kj] + acc;
                    }
                }
            }
        }
    }
}

/// Plain convolution without recording. `x: [N,Cin,H,W]`, `w: [Cout, Cin/groups, kh, kw]`.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, geom: ConvGeom) -> Result<Tensor<T>> {
    let d = dims(x, w, geom)?;
    if let Some(b) = b {
        if b.shape() != [d.cout] {
            return Err(shape_err("conv2d", alloc::format!("bias {:?} for {} channels", b.shape(), d.cout)));
        }
    }
    let mut out = Tensor::zeros(&[d.n, d.cout, d.ho, d.wo]);
    let plane = d.ho * d.wo;
    if d.is_depthwise() {
        depthwise_forward(x.data(), w.data(), &d, out.data_mut());
    } else {
        let (cin_g, cout_g) = (d.cin_g(), d.cout_g());
        let krows = cin_g * d.kh * d.kw;
        let mut cols = if d.is_pointwise() { Vec::new() } else { vec![T::zero(); krows * plane] };
        for n in 0..d.n {
            for gi in 0..d.geom.groups {
                let xin = &x.data()[(n * d.cin + gi * cin_g) * d.h * d.w..][..cin_g * d.h * d.w];
                let rhs: &[T] = if d.is_pointwise() {
                    xin
                } else {
                    im2col(xin, cin_g, &d, &mut cols);
                    &cols
                };
                let wg = &w.data()[gi * cout_g * krows..(gi + 1) * cout_g * krows];
                let dst = &mut out.data_mut()[(n * d.cout + gi * cout_g) * plane..][..cout_g * plane];
                gemm(Trans::No, Trans::No, cout_g, krows, plane, T::one(), wg, rhs, T::zero(), dst);
            }
        }
    }
    if let Some(b) = b {
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bv = b.data()[i % d.cout];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    Ok(out)
}

/// Differentiable 2-D convolution (cross-correlation), NCHW layout.
pub fn conv2d<T: Real>(
    g: &Graph<T>,
    x: &Var<T>,
    w: &Var<T>,
    b: Option<&Var<T>>,
    geom: ConvGeom,
) -> Result<Var<T>> {
    let out = conv2d_forward(x.value(), w.value(), b.map(|b| b.value()), geom)?;
    let d = dims(x.value(), w.value(), geom)?;
    let xs = x.rc();
    let ws = w.rc();
    let mut inputs = vec![x, w];
    if let Some(b) = b {
        inputs.push(b);
    }
    Ok(g.record(out, &inputs, move |dy, needs| {
        let plane = d.ho * d.wo;
        let mut dx = needs[0].then(|| Tensor::zeros(xs.shape()));
        let mut dw = needs[1].then(|| Tensor::zeros(ws.shape()));
        if d.is_depthwise() {
            depthwise_backward(
                xs.data(),
                ws.data(),
                dy.data(),
                &d,
                dx.as_mut().map(|t| t.data_mut()),
                dw.as_mut().map(|t| t.data_mut()),
            );
        } else {
            let (cin_g, cout_g) = (d.cin_g(), d.cout_g());
            let krows = cin_g * d.kh * d.kw;
            let mut cols = if d.is_pointwise() { Vec::new() } else { vec![T::zero(); krows * plane] };
            let mut dcols = if d.is_pointwise() || dx.is_none() { Vec::new() } else { vec![T::zero(); krows * plane] };
            for n in 0..d.n {
                for gi in 0..d.geom.groups {
                    let xin = &xs.data()[(n * d.cin + gi * cin_g) * d.h * d.w..][..cin_g * d.h * d.w];
                    let gy = &dy.data()[(n * d.cout + gi * cout_g) * plane..][..cout_g * plane];
                    let wg = &ws.data()[gi * cout_g * krows..(gi + 1) * cout_g * krows];
                    if let Some(dw) = dw.as_mut() {
                        let rhs: &[T] = if d.is_pointwise() {
                            xin
                        } else {
                            im2col(xin, cin_g, &d, &mut cols);
                            &cols
                        };
                        let dwg = &mut dw.data_mut()[gi * cout_g * krows..(gi + 1) * cout_g * krows];
                        gemm(Trans::No, Trans::Yes, cout_g, plane, krows, T::one(), gy, rhs, T::one(), dwg);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxin = &mut dx.data_mut()[(n * d.cin + gi * cin_g) * d.h * d.w..][..cin_g * d.h * d.w];
                        if d.is_pointwise() {
                            gemm(Trans::Yes, Trans::No, krows, cout_g, plane, T::one(), wg, gy, T::one(), dxin);
                        } else {
                            gemm(Trans::Yes, Trans::No, krows, cout_g, plane, T::one(), wg, gy, T::zero(), &mut dcols);
                            col2im(&dcols, cin_g, &d, dxin);
                        }
                    }
                }
            }
        }
        let mut res = vec![dx, dw];
        if needs.len() > 2 {
            res.push(needs[2].then(|| {
                let mut db = Tensor::zeros(&[d.cout]);
                for (i, chunk) in dy.data().chunks(plane).enumerate() {
                    let s: T = chunk.iter().copied().sum();
                    db.data_mut()[i % d.cout] = db.data_mut()[i % d.cout] + s;
                }
                db
            }));
        }
        res
    }))
}

use std::ops::Range;

use super::{Mode, TensorInfo};
use crate::numkernel::{Matrix, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer {
    /// `y = x W + b`, `W` stored `inp × out` row-major, then `b`.
    Dense {
        inp: usize,
        out: usize,
        offset: usize,
    },
    /// Stride-1 "same" convolution; weights `out_ch × in_ch × k × k`, then
    /// one bias per output channel. Activations are channel-major.
    Conv {
        in_ch: usize,
        out_ch: usize,
        h: usize,
        w: usize,
        k: usize,
        offset: usize,
    },
    Relu,
    /// 2x2 max pooling, stride 2, trailing odd row/column dropped.
    MaxPool {
        ch: usize,
        h: usize,
        w: usize,
    },
    Dropout {
        rate: f64,
    },
}

#[derive(Debug, Clone)]
pub(crate) enum Aux {
    None,
    /// Per-element multiplier (0 or 1/keep).
    Mask(Vec<f64>),
    /// For each pooled output, the input index it came from.
    Argmax(Vec<usize>),
}

impl Layer {
    pub(crate) fn dense(inp: usize, out: usize, offset: usize) -> Self {
        Layer::Dense { inp, out, offset }
    }

    pub(crate) fn conv(in_ch: usize, out_ch: usize, h: usize, w: usize, k: usize, offset: usize) -> Self {
        Layer::Conv {
            in_ch,
            out_ch,
            h,
            w,
            k,
            offset,
        }
    }

    pub(crate) fn param_len(&self) -> usize {
        match *self {
            Layer::Dense { inp, out, .. } => inp * out + out,
            Layer::Conv { in_ch, out_ch, k, .. } => out_ch * in_ch * k * k + out_ch,
            _ => 0,
        }
    }

    /// Weight slice and fan-in, for initialization.
    pub(crate) fn weight_range(&self) -> Option<(Range<usize>, usize)> {
        match *self {
            Layer::Dense { inp, out, offset } => Some((offset..offset + inp * out, inp)),
            Layer::Conv {
                in_ch,
                out_ch,
                k,
                offset,
                ..
            } => Some((offset..offset + out_ch * in_ch * k * k, in_ch * k * k)),
            _ => None,
        }
    }

    pub(crate) fn tensors(&self, index: usize) -> Vec<TensorInfo> {
        match *self {
            Layer::Dense { inp, out, offset } => vec![
                TensorInfo {
                    name: format!("layer{index}.dense.weight"),
                    shape: vec![inp, out],
                    offset,
                },
                TensorInfo {
                    name: format!("layer{index}.dense.bias"),
                    shape: vec![out],
                    offset: offset + inp * out,
                },
            ],
            Layer::Conv {
                in_ch,
                out_ch,
                k,
                offset,
                ..
            } => vec![
                TensorInfo {
                    name: format!("layer{index}.conv.weight"),
                    shape: vec![out_ch, in_ch, k, k],
                    offset,
                },
                TensorInfo {
                    name: format!("layer{index}.conv.bias"),
                    shape: vec![out_ch],
                    offset: offset + out_ch * in_ch * k * k,
                },
            ],
            _ => Vec::new(),
        }
    }

    pub(crate) fn forward(&self, params: &[f64], x: &Matrix, mode: Mode, rng: &mut RngStream) -> (Matrix, Aux) {
        let n = x.rows();
        match *self {
            Layer::Dense { inp, out, offset } => {
                let w = &params[offset..offset + inp * out];
                let b = &params[offset + inp * out..offset + inp * out + out];
                let mut y = x.matmul_slice(w, out);
                for r in 0..n {
                    for (v, bb) in y.row_mut(r).iter_mut().zip(b) {
                        *v += bb;
                    }
                }
                (y, Aux::None)
            }
            Layer::Conv {
                in_ch,
                out_ch,
                h,
                w,
                k,
                offset,
            } => {
                let wt = &params[offset..offset + out_ch * in_ch * k * k];
                let bias = &params[offset + out_ch * in_ch * k * k..offset + self.param_len()];
                let pad = (k / 2) as isize;
                let plane = h * w;
                let mut y = Matrix::zeros(n, out_ch * plane);
                for r in 0..n {
                    let xi = x.row(r);
                    let yo = y.row_mut(r);
                    for oc in 0..out_ch {
                        let out_plane = &mut yo[oc * plane..(oc + 1) * plane];
                        out_plane.iter_mut().for_each(|v| *v = bias[oc]);
                        for ic in 0..in_ch {
                            let in_plane = &xi[ic * plane..(ic + 1) * plane];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let wv = wt[((oc * in_ch + ic) * k + ky) * k + kx];
                                    let dy = ky as isize - pad;
                                    let dx = kx as isize - pad;
                                    for yy in 0..h {
                                        let sy = yy as isize + dy;
                                        if sy < 0 || sy >= h as isize {
                                            continue;
                                        }
                                        let src = &in_plane[sy as usize * w..(sy as usize + 1) * w];
                                        let dst = &mut out_plane[yy * w..(yy + 1) * w];
                                        for (xx, d) in dst.iter_mut().enumerate() {
                                            let sx = xx as isize + dx;
                                            if sx >= 0 && sx < w as isize {
                                                *d += wv * src[sx as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                (y, Aux::None)
            }
            Layer::Relu => {
                // NaN passes through so divergence stays visible downstream.
                let vals = x
                    .values()
                    .iter()
                    .map(|&v| if v > 0.0 || v.is_nan() { v } else { 0.0 })
                    .collect();
                (Matrix::from_raw(n, x.cols(), vals), Aux::None)
            }
            Layer::MaxPool { ch, h, w } => {
                let (h2, w2) = (h / 2, w / 2);
                let mut y = Matrix::zeros(n, ch * h2 * w2);
                let mut arg = Vec::with_capacity(n * ch * h2 * w2);
                for r in 0..n {
                    let xi = x.row(r);
                    let yo = y.row_mut(r);
                    let mut o = 0;
                    for c in 0..ch {
                        for py in 0..h2 {
                            for px in 0..w2 {
                                let base = c * h * w + 2 * py * w + 2 * px;
                                let mut best = base;
                                for cand in [base + 1, base + w, base + w + 1] {
                                    if xi[cand] > xi[best] {
                                        best = cand;
                                    }
                                }
                                yo[o] = xi[best];
                                arg.push(best);
                                o += 1;
                            }
                        }
                    }
                }
                (y, Aux::Argmax(arg))
            }
            Layer::Dropout { rate } => {
                if mode == Mode::Eval || rate == 0.0 {
                    return (x.clone(), Aux::None);
                }
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..x.values().len())
                    .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let vals = x.values().iter().zip(&mask).map(|(v, m)| v * m).collect();
                (Matrix::from_raw(n, x.cols(), vals), Aux::Mask(mask))
            }
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the
    /// gradient with respect to the layer input (empty when `need_dx` is
    /// false).
    pub(crate) fn backward(
        &self,
        params: &[f64],
        x: &Matrix,
        aux: &Aux,
        dy: &Matrix,
        grads: &mut [f64],
        need_dx: bool,
    ) -> Matrix {
        let n = x.rows();
        match *self {
            Layer::Dense { inp, out, offset } => {
                let (gw, rest) = grads[offset..offset + inp * out + out].split_at_mut(inp * out);
                x.accumulate_transposed_matmul(dy, gw);
                for row in dy.iter_rows() {
                    for (g, d) in rest.iter_mut().zip(row) {
                        *g += d;
                    }
                }
                if need_dx {
                    dy.matmul_transposed_slice(&params[offset..offset + inp * out], inp)
                } else {
                    Matrix::zeros(0, 0)
                }
            }
            Layer::Conv {
                in_ch,
                out_ch,
                h,
                w,
                k,
                offset,
            } => {
                let nw = out_ch * in_ch * k * k;
                let wt = &params[offset..offset + nw];
                let (gw, gb) = grads[offset..offset + nw + out_ch].split_at_mut(nw);
                let pad = (k / 2) as isize;
                let plane = h * w;
                let mut dx = if need_dx {
                    Matrix::zeros(n, in_ch * plane)
                } else {
                    Matrix::zeros(0, 0)
                };
                for r in 0..n {
                    let xi = x.row(r);
                    let di = dy.row(r);
                    for oc in 0..out_ch {
                        let dplane = &di[oc * plane..(oc + 1) * plane];
                        gb[oc] += dplane.iter().sum::<f64>();
                        for ic in 0..in_ch {
                            let in_plane = &xi[ic * plane..(ic + 1) * plane];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let widx = ((oc * in_ch + ic) * k + ky) * k + kx;
                                    let dyo = ky as isize - pad;
                                    let dxo = kx as isize - pad;
                                    let mut acc = 0.0;
                                    for yy in 0..h {
                                        let sy = yy as isize + dyo;
                                        if sy < 0 || sy >= h as isize {
                                            continue;
                                        }
                                        for xx in 0..w {
                                            let sx = xx as isize + dxo;
                                            if sx < 0 || sx >= w as isize {
                                                continue;
                                            }
                                            let src = sy as usize * w + sx as usize;
                                            let g = dplane[yy * w + xx];
                                            acc += g * in_plane[src];
                                            if need_dx {
                                                dx.row_mut(r)[ic * plane + src] += g * wt[widx];
                                            }
                                        }
                                    }
                                    gw[widx] += acc;
                                }
                            }
                        }
                    }
                }
                dx
            }
            Layer::Relu => {
                let vals = x
                    .values()
                    .iter()
                    .zip(dy.values())
                    .map(|(&xv, &d)| if xv > 0.0 { d } else { 0.0 })
                    .collect();
                Matrix::from_raw(n, x.cols(), vals)
            }
            Layer::MaxPool { .. } => {
                let Aux::Argmax(arg) = aux else {
                    unreachable!("pooling cache always records argmax")
                };
                let mut dx = Matrix::zeros(n, x.cols());
                let per = dy.cols();
                for r in 0..n {
                    let d = dy.row(r);
                    let idx = &arg[r * per..(r + 1) * per];
                    let out = dx.row_mut(r);
                    for (g, &i) in d.iter().zip(idx) {
                        out[i] += g;
                    }
                }
                dx
            }
            Layer::Dropout { .. } => match aux {
                Aux::Mask(mask) => {
                    let vals = dy.values().iter().zip(mask).map(|(d, m)| d * m).collect();
                    Matrix::from_raw(n, x.cols(), vals)
                }
                _ => dy.clone(),
            },
        }
    }
}

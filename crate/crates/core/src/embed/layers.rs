//! Forward and backward kernels. All feature maps are CHW, row-major.

use super::{DenseParams, LayerShape};

/// Valid (unpadded) strided convolution plus bias.
pub(crate) fn conv_forward(input: &[f64], shape: &LayerShape, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (c, h, w) = shape.input;
    let (f, ho, wo) = shape.conv;
    let k = shape.spec.kernel;
    let s = shape.spec.stride;
    let mut out = vec![0.0; f * ho * wo];
    for fo in 0..f {
        let plane = &mut out[fo * ho * wo..(fo + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = bias[fo]);
        for ci in 0..c {
            let in_plane = &input[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let wv = weight[((fo * c + ci) * k + ki) * k + kj];
                    for oy in 0..ho {
                        let in_row = &in_plane[(oy * s + ki) * w + kj..];
                        let out_row = &mut plane[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            for (o, x) in out_row.iter_mut().zip(&in_row[..wo]) {
                                *o += wv * x;
                            }
                        } else {
                            for (ox, o) in out_row.iter_mut().enumerate() {
                                *o += wv * in_row[ox * s];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients; returns the input gradient (empty when
/// `need_input_grad` is false).
pub(crate) fn conv_backward(
    input: &[f64],
    shape: &LayerShape,
    weight: &[f64],
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let (c, h, w) = shape.input;
    let (f, ho, wo) = shape.conv;
    let k = shape.spec.kernel;
    let s = shape.spec.stride;
    let mut d_in = if need_input_grad {
        vec![0.0; c * h * w]
    } else {
        Vec::new()
    };
    for fo in 0..f {
        let g_plane = &d_out[fo * ho * wo..(fo + 1) * ho * wo];
        d_bias[fo] += g_plane.iter().sum::<f64>();
        for ci in 0..c {
            let in_plane = &input[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let widx = ((fo * c + ci) * k + ki) * k + kj;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let g_row = &g_plane[oy * wo..(oy + 1) * wo];
                        let base = (oy * s + ki) * w + kj;
                        if s == 1 {
                            let in_row = &in_plane[base..base + wo];
                            acc += g_row.iter().zip(in_row).map(|(g, x)| g * x).sum::<f64>();
                            if need_input_grad {
                                let d_row = &mut d_in[ci * h * w + base..ci * h * w + base + wo];
                                for (d, g) in d_row.iter_mut().zip(g_row) {
                                    *d += wv * g;
                                }
                            }
                        } else {
                            for (ox, g) in g_row.iter().enumerate() {
                                acc += g * in_plane[base + ox * s];
                                if need_input_grad {
                                    d_in[ci * h * w + base + ox * s] += wv * g;
                                }
                            }
                        }
                    }
                    d_weight[widx] += acc;
                }
            }
        }
    }
    d_in
}

/// 2×2 stride-2 max-pool (floor). Ties resolve to the first element in
/// row-major window order.
pub(crate) fn maxpool_forward(input: &[f64], (c, h, w): (usize, usize, usize)) -> (Vec<f64>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    let mut arg = vec![0u32; c * ho * wo];
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (ci * h + 2 * oy + dy) * w + 2 * ox + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ci * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = best_idx as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward(d_out: &[f64], argmax: &[u32], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let mut d_in = vec![0.0; c * h * w];
    for (g, &i) in d_out.iter().zip(argmax) {
        d_in[i as usize] += g;
    }
    d_in
}

fn bin(i: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let start = i * n_in / n_out;
    let end = ((i + 1) * n_in).div_ceil(n_out);
    (start, end)
}

/// Adaptive average pooling from `(c, h, w)` down to `(c, ho, wo)`.
pub(crate) fn adaptive_avgpool_forward(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    (_, ho, wo): (usize, usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        for oy in 0..ho {
            let (y0, y1) = bin(oy, h, ho);
            for ox in 0..wo {
                let (x0, x1) = bin(ox, w, wo);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += input[(ci * h + y) * w + x];
                    }
                }
                out[(ci * ho + oy) * wo + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub(crate) fn adaptive_avgpool_backward(
    d_out: &[f64],
    (c, h, w): (usize, usize, usize),
    (_, ho, wo): (usize, usize, usize),
) -> Vec<f64> {
    let mut d_in = vec![0.0; c * h * w];
    for ci in 0..c {
        for oy in 0..ho {
            let (y0, y1) = bin(oy, h, ho);
            for ox in 0..wo {
                let (x0, x1) = bin(ox, w, wo);
                let g = d_out[(ci * ho + oy) * wo + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        d_in[(ci * h + y) * w + x] += g;
                    }
                }
            }
        }
    }
    d_in
}

pub(crate) fn dense_forward(p: &DenseParams, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    p.bias
        .iter()
        .enumerate()
        .map(|(o, b)| b + p.weight[o * n..(o + 1) * n].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

/// Accumulates into `grads`; returns the input gradient.
pub(crate) fn dense_backward(p: &DenseParams, x: &[f64], d_out: &[f64], grads: &mut DenseParams) -> Vec<f64> {
    let n = x.len();
    let mut d_in = vec![0.0; n];
    for (o, g) in d_out.iter().enumerate() {
        grads.bias[o] += g;
        if *g == 0.0 {
            continue;
        }
        let w_row = &p.weight[o * n..(o + 1) * n];
        let gw_row = &mut grads.weight[o * n..(o + 1) * n];
        for ((gw, xi), (di, wi)) in gw_row.iter_mut().zip(x).zip(d_in.iter_mut().zip(w_row)) {
            *gw += g * xi;
            *di += g * wi;
        }
    }
    d_in
}

//! Forward and backward kernels for the spatial ops. Layout is NHWC with the
//! channel axis contiguous; kernels are [kh, kw, cin, cout].

use super::TensorError;

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    xs: &[usize],
    k: &[f64],
    ks: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(Vec<f64>, Vec<usize>), TensorError> {
    let (n, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw, _, cout) = (ks[0], ks[1], ks[2], ks[3]);
    let oh = conv_out_size(h, kh, stride, pad).ok_or_else(|| {
        TensorError::ShapeMismatch(format!("kernel {kh}x{kw} larger than padded input"))
    })?;
    let ow = conv_out_size(w, kw, stride, pad).ok_or_else(|| {
        TensorError::ShapeMismatch(format!("kernel {kh}x{kw} larger than padded input"))
    })?;
    let mut out = vec![0.0; n * oh * ow * cout];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let acc = &mut out[((b * oh + oy) * ow + ox) * cout..][..cout];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let x_base = ((b * h + iy as usize) * w + ix as usize) * cin;
                        let k_base = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = x[x_base + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let krow = &k[k_base + ci * cout..][..cout];
                            for (a, &kv) in acc.iter_mut().zip(krow) {
                                *a += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, vec![n, oh, ow, cout]))
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    grad: &[f64],
    out_shape: &[usize],
    x: &[f64],
    xs: &[usize],
    k: &[f64],
    ks: &[usize],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (n, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw, _, cout) = (ks[0], ks[1], ks[2], ks[3]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = &grad[((b * oh + oy) * ow + ox) * cout..][..cout];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let x_base = ((b * h + iy as usize) * w + ix as usize) * cin;
                        let k_base = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = x[x_base + ci];
                            let krow = &k[k_base + ci * cout..][..cout];
                            let mut dxv = 0.0;
                            let dkrow = &mut dk[k_base + ci * cout..][..cout];
                            for co in 0..cout {
                                dxv += g[co] * krow[co];
                                dkrow[co] += g[co] * xv;
                            }
                            dx[x_base + ci] += dxv;
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

pub fn maxpool_forward(
    x: &[f64],
    xs: &[usize],
    window: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = vec![0.0; n * oh * ow * c];
    let mut argmax = vec![0usize; out.len()];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    // first maximum in row-major order wins ties
                    for ky in 0..window {
                        for kx in 0..window {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            let idx = ((b * h + iy) * w + ix) * c + ch;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((b * oh + oy) * ow + ox) * c + ch;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    (out, argmax, vec![n, oh, ow, c])
}

fn src_coord(out_i: usize, out_n: usize, in_n: usize) -> f64 {
    if out_n <= 1 || in_n <= 1 {
        0.0
    } else {
        out_i as f64 * (in_n as f64 - 1.0) / (out_n as f64 - 1.0)
    }
}

pub fn bilinear_forward(x: &[f64], xs: &[usize], out_h: usize, out_w: usize) -> Vec<f64> {
    let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let mut out = vec![0.0; n * out_h * out_w * c];
    for b in 0..n {
        for oy in 0..out_h {
            let sy = src_coord(oy, out_h, h);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = src_coord(ox, out_w, w);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                for ch in 0..c {
                    let at = |y: usize, xq: usize| x[((b * h + y) * w + xq) * c + ch];
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    out[((b * out_h + oy) * out_w + ox) * c + ch] =
                        top * (1.0 - fy) + bottom * fy;
                }
            }
        }
    }
    out
}

/// Transpose of the fixed interpolation weights: scatter each output gradient
/// onto its four source corners.
pub fn bilinear_backward(grad: &[f64], out_shape: &[usize], xs: &[usize]) -> Vec<f64> {
    let (n, out_h, out_w, c) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
    let (h, w) = (xs[1], xs[2]);
    let mut dx = vec![0.0; xs.iter().product()];
    for b in 0..n {
        for oy in 0..out_h {
            let sy = src_coord(oy, out_h, h);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = src_coord(ox, out_w, w);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                for ch in 0..c {
                    let g = grad[((b * out_h + oy) * out_w + ox) * c + ch];
                    let mut put = |y: usize, xq: usize, wgt: f64| {
                        dx[((b * h + y) * w + xq) * c + ch] += g * wgt;
                    };
                    put(y0, x0, (1.0 - fx) * (1.0 - fy));
                    put(y0, x1, fx * (1.0 - fy));
                    put(y1, x0, (1.0 - fx) * fy);
                    put(y1, x1, fx * fy);
                }
            }
        }
    }
    dx
}

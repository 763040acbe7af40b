//! Raw convolution kernels over flat `[C, H, W]` buffers.
//!
//! Forward convolutions use "same"-style padding `p = k / 2` (k odd), so a
//! stride-`s` conv maps `H -> ceil(H / s)`. Transposed convolutions scatter
//! through the same padding with an implicit output padding of `s - 1`, so
//! they map `H -> H * s` exactly. Weight layout is `[C_out, C_in, k, k]` for
//! both directions.

/// Valid range of `t` in `[0, n)` such that `0 <= t * s + d < m`.
#[inline]
fn span(n: usize, m: usize, s: usize, d: isize) -> (usize, usize) {
    let lo = if d >= 0 {
        0
    } else {
        ((-d) as usize).div_ceil(s)
    };
    let hi = if m as isize <= d {
        0
    } else {
        (m as isize - 1 - d) as usize / s + 1
    };
    (lo.min(n), hi.min(n))
}

pub fn conv_out_dim(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// out[o, i, j] = bias[o] + sum_{c,u,v} x[c, i*s + u - p, j*s + v - p] * w[o, c, u, v]
pub fn conv2d_fwd(
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    wgt: &[f64],
    co: usize,
    k: usize,
    s: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let p = (k / 2) as isize;
    let (oh, ow) = (conv_out_dim(h, s), conv_out_dim(w, s));
    let mut out = vec![0.0; co * oh * ow];
    if let Some(b) = bias {
        for o in 0..co {
            out[o * oh * ow..(o + 1) * oh * ow].fill(b[o]);
        }
    }
    for o in 0..co {
        for c in 0..ci {
            for u in 0..k {
                let dy = u as isize - p;
                let (y0, y1) = span(oh, h, s, dy);
                for v in 0..k {
                    let dx = v as isize - p;
                    let (x0, x1) = span(ow, w, s, dx);
                    let wv = wgt[((o * ci + c) * k + u) * k + v];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = (oy * s) as isize + dy;
                        let xrow = &x[(c * h + iy as usize) * w..];
                        let orow = &mut out[(o * oh + oy) * ow..];
                        for ox in x0..x1 {
                            let ix = ((ox * s) as isize + dx) as usize;
                            orow[ox] += wv * xrow[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of `conv2d_fwd` w.r.t. its input (scatter of `gout`).
pub fn conv2d_bwd_input(
    gout: &[f64],
    (ci, h, w): (usize, usize, usize),
    wgt: &[f64],
    co: usize,
    k: usize,
    s: usize,
) -> Vec<f64> {
    let p = (k / 2) as isize;
    let (oh, ow) = (conv_out_dim(h, s), conv_out_dim(w, s));
    let mut gin = vec![0.0; ci * h * w];
    for o in 0..co {
        for c in 0..ci {
            for u in 0..k {
                let dy = u as isize - p;
                let (y0, y1) = span(oh, h, s, dy);
                for v in 0..k {
                    let dx = v as isize - p;
                    let (x0, x1) = span(ow, w, s, dx);
                    let wv = wgt[((o * ci + c) * k + u) * k + v];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = ((oy * s) as isize + dy) as usize;
                        let grow = &gout[(o * oh + oy) * ow..];
                        let irow = &mut gin[(c * h + iy) * w..];
                        for ox in x0..x1 {
                            let ix = ((ox * s) as isize + dx) as usize;
                            irow[ix] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Gradient of `conv2d_fwd` w.r.t. its weight.
pub fn conv2d_bwd_weight(
    gout: &[f64],
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    co: usize,
    k: usize,
    s: usize,
) -> Vec<f64> {
    let p = (k / 2) as isize;
    let (oh, ow) = (conv_out_dim(h, s), conv_out_dim(w, s));
    let mut gw = vec![0.0; co * ci * k * k];
    for o in 0..co {
        for c in 0..ci {
            for u in 0..k {
                let dy = u as isize - p;
                let (y0, y1) = span(oh, h, s, dy);
                for v in 0..k {
                    let dx = v as isize - p;
                    let (x0, x1) = span(ow, w, s, dx);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = ((oy * s) as isize + dy) as usize;
                        let xrow = &x[(c * h + iy) * w..];
                        let grow = &gout[(o * oh + oy) * ow..];
                        for ox in x0..x1 {
                            let ix = ((ox * s) as isize + dx) as usize;
                            acc += grow[ox] * xrow[ix];
                        }
                    }
                    gw[((o * ci + c) * k + u) * k + v] = acc;
                }
            }
        }
    }
    gw
}

/// out[o, i*s + u - p, j*s + v - p] += x[c, i, j] * w[o, c, u, v]; output is `[co, h*s, w*s]`.
pub fn tconv2d_fwd(
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    wgt: &[f64],
    co: usize,
    k: usize,
    s: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let p = (k / 2) as isize;
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0.0; co * oh * ow];
    if let Some(b) = bias {
        for o in 0..co {
            out[o * oh * ow..(o + 1) * oh * ow].fill(b[o]);
        }
    }
    for o in 0..co {
        for c in 0..ci {
            for u in 0..k {
                let dy = u as isize - p;
                let (y0, y1) = span(h, oh, s, dy);
                for v in 0..k {
                    let dx = v as isize - p;
                    let (x0, x1) = span(w, ow, s, dx);
                    let wv = wgt[((o * ci + c) * k + u) * k + v];
                    if wv == 0.0 {
                        continue;
                    }
                    for i in y0..y1 {
                        let oy = ((i * s) as isize + dy) as usize;
                        let xrow = &x[(c * h + i) * w..];
                        let orow = &mut out[(o * oh + oy) * ow..];
                        for j in x0..x1 {
                            let ox = ((j * s) as isize + dx) as usize;
                            orow[ox] += wv * xrow[j];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of `tconv2d_fwd` w.r.t. its input (gather from `gout`).
pub fn tconv2d_bwd_input(
    gout: &[f64],
    (ci, h, w): (usize, usize, usize),
    wgt: &[f64],
    co: usize,
    k: usize,
    s: usize,
) -> Vec<f64> {
    let p = (k / 2) as isize;
    let (oh, ow) = (h * s, w * s);
    let mut gin = vec![0.0; ci * h * w];
    for o in 0..co {
        for c in 0..ci {
            for u in 0..k {
                let dy = u as isize - p;
                let (y0, y1) = span(h, oh, s, dy);
                for v in 0..k {
                    let dx = v as isize - p;
                    let (x0, x1) = span(w, ow, s, dx);
                    let wv = wgt[((o * ci + c) * k + u) * k + v];
                    if wv == 0.0 {
                        continue;
                    }
                    for i in y0..y1 {
                        let oy = ((i * s) as isize + dy) as usize;
                        let grow = &gout[(o * oh + oy) * ow..];
                        let irow = &mut gin[(c * h + i) * w..];
                        for j in x0..x1 {
                            let ox = ((j * s) as isize + dx) as usize;
                            irow[j] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Gradient of `tconv2d_fwd` w.r.t. its weight.
pub fn tconv2d_bwd_weight(
    gout: &[f64],
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    co: usize,
    k: usize,
    s: usize,
) -> Vec<f64> {
    let p = (k / 2) as isize;
    let (oh, ow) = (h * s, w * s);
    let mut gw = vec![0.0; co * ci * k * k];
    for o in 0..co {
        for c in 0..ci {
            for u in 0..k {
                let dy = u as isize - p;
                let (y0, y1) = span(h, oh, s, dy);
                for v in 0..k {
                    let dx = v as isize - p;
                    let (x0, x1) = span(w, ow, s, dx);
                    let mut acc = 0.0;
                    for i in y0..y1 {
                        let oy = ((i * s) as isize + dy) as usize;
                        let xrow = &x[(c * h + i) * w..];
                        let grow = &gout[(o * oh + oy) * ow..];
                        for j in x0..x1 {
                            let ox = ((j * s) as isize + dx) as usize;
                            acc += xrow[j] * grow[ox];
                        }
                    }
                    gw[((o * ci + c) * k + u) * k + v] = acc;
                }
            }
        }
    }
    gw
}

/// Depthwise valid-mode correlation with one shared `k x k` kernel.
pub fn depthwise_valid_fwd(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    kernel: &[f64],
    k: usize,
) -> Vec<f64> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for u in 0..k {
            for v in 0..k {
                let kv = kernel[u * k + v];
                for oy in 0..oh {
                    let xrow = &x[(ch * h + oy + u) * w + v..];
                    let orow = &mut out[(ch * oh + oy) * ow..];
                    for ox in 0..ow {
                        orow[ox] += kv * xrow[ox];
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_valid_bwd(
    gout: &[f64],
    (c, h, w): (usize, usize, usize),
    kernel: &[f64],
    k: usize,
) -> Vec<f64> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut gin = vec![0.0; c * h * w];
    for ch in 0..c {
        for u in 0..k {
            for v in 0..k {
                let kv = kernel[u * k + v];
                for oy in 0..oh {
                    let grow = &gout[(ch * oh + oy) * ow..];
                    let irow = &mut gin[(ch * h + oy + u) * w + v..];
                    for ox in 0..ow {
                        irow[ox] += kv * grow[ox];
                    }
                }
            }
        }
    }
    gin
}

//! PSNR and multi-scale SSIM.
//!
//! MS-SSIM uses a 7x7 Gaussian window (sigma 1.5) rather than the common
//! 11x11, five dyadic scales with the standard exponents, valid-mode
//! filtering, and channels averaged within each scale. The contrast and
//! structure factors are clamped at zero before exponentiation, which keeps
//! the score inside [0, 1].
//!
//! Every metric exists as a plain f64 function for evaluation and, for
//! MS-SSIM, as a graph expression so 1 - MS-SSIM can serve as a training
//! distortion.

use crate::tensor::{Graph, NodeId, Tensor};
use crate::{Error, Result};

pub const MSSSIM_WINDOW: usize = 7;
pub const MSSSIM_SIGMA: f64 = 1.5;
pub const MSSSIM_SCALES: usize = 5;
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Normalized Gaussian window used by MS-SSIM, row-major `size x size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..size * size)
        .map(|i| {
            let y = i / size;
            let x = i % size;
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "metric inputs must be equal [C,H,W] shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a.shape()[0], a.shape()[1], a.shape()[2]))
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.numel() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio over [0,1] pixels, capped at 100 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(100.0);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// Dims the five dyadic scales will see; the smallest must still fit the
/// window.
fn scale_dims(mut h: usize, mut w: usize) -> Vec<(usize, usize)> {
    let mut dims = vec![(h, w)];
    for _ in 1..MSSSIM_SCALES {
        h /= 2;
        w /= 2;
        dims.push((h, w));
    }
    dims
}

fn check_msssim_size(h: usize, w: usize) -> Result<()> {
    let dims = scale_dims(h, w);
    let (mh, mw) = dims[MSSSIM_SCALES - 1];
    if mh < MSSSIM_WINDOW || mw < MSSSIM_WINDOW {
        return Err(Error::Metric(format!(
            "{h}x{w} image leaves {mh}x{mw} at scale {MSSSIM_SCALES}, below the \
             {MSSSIM_WINDOW}x{MSSSIM_WINDOW} window"
        )));
    }
    Ok(())
}

fn filter_valid(src: &[f64], (c, h, w): (usize, usize, usize), win: &[f64], k: usize) -> Vec<f64> {
    crate::tensor::conv::depthwise_valid_fwd(src, (c, h, w), win, k)
}

fn downsample2(src: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let base = (ch * h + 2 * y) * w + 2 * x;
                out[(ch * oh + y) * ow + x] =
                    0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
            }
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure factor for one scale.
fn ssim_components(
    a: &[f64],
    b: &[f64],
    dims: (usize, usize, usize),
    win: &[f64],
) -> (f64, f64) {
    let k = MSSSIM_WINDOW;
    let mu1 = filter_valid(a, dims, win, k);
    let mu2 = filter_valid(b, dims, win, k);
    let sq1: Vec<f64> = a.iter().map(|v| v * v).collect();
    let sq2: Vec<f64> = b.iter().map(|v| v * v).collect();
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let e_sq1 = filter_valid(&sq1, dims, win, k);
    let e_sq2 = filter_valid(&sq2, dims, win, k);
    let e_prod = filter_valid(&prod, dims, win, k);
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    for i in 0..mu1.len() {
        let (m1, m2) = (mu1[i], mu2[i]);
        let v1 = e_sq1[i] - m1 * m1;
        let v2 = e_sq2[i] - m2 * m2;
        let cov = e_prod[i] - m1 * m2;
        let cs = (2.0 * cov + C2) / (v1 + v2 + C2);
        let lum = (2.0 * m1 * m2 + C1) / (m1 * m1 + m2 * m2 + C1);
        cs_sum += cs;
        ssim_sum += lum * cs;
    }
    (ssim_sum / mu1.len() as f64, cs_sum / mu1.len() as f64)
}

/// Multi-scale structural similarity between two `[C,H,W]` images in [0,1].
pub fn msssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (c, h, w) = check_pair(a, b)?;
    check_msssim_size(h, w)?;
    let win = gaussian_window(MSSSIM_WINDOW, MSSSIM_SIGMA);
    let mut cur_a = a.data().to_vec();
    let mut cur_b = b.data().to_vec();
    let (mut ch, mut cw) = (h, w);
    let mut score = 1.0;
    for scale in 0..MSSSIM_SCALES {
        let (ssim, cs) = ssim_components(&cur_a, &cur_b, (c, ch, cw), &win);
        if scale + 1 < MSSSIM_SCALES {
            score *= cs.max(0.0).powf(MSSSIM_WEIGHTS[scale]);
            cur_a = downsample2(&cur_a, (c, ch, cw));
            cur_b = downsample2(&cur_b, (c, ch, cw));
            ch /= 2;
            cw /= 2;
        } else {
            score *= ssim.max(0.0).powf(MSSSIM_WEIGHTS[scale]);
        }
    }
    Ok(score)
}

/// MS-SSIM as a graph expression (same algorithm as [`msssim`]), so that
/// `1 - msssim` can be optimized directly. `a` is typically the
/// reconstruction node; `b` the reference.
pub fn msssim_graph(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let sa = g.shape(a).to_vec();
    if sa != g.shape(b) || sa.len() != 3 {
        return Err(Error::Shape("msssim_graph inputs must match [C,H,W]".into()));
    }
    check_msssim_size(sa[1], sa[2])?;
    let win = gaussian_window(MSSSIM_WINDOW, MSSSIM_SIGMA);
    let mut xa = a;
    let mut xb = b;
    let mut factors: Vec<NodeId> = Vec::new();
    for scale in 0..MSSSIM_SCALES {
        let mu1 = g.depthwise_conv_valid(xa, &win);
        let mu2 = g.depthwise_conv_valid(xb, &win);
        let a2 = g.square(xa);
        let b2 = g.square(xb);
        let ab = g.mul(xa, xb);
        let e_a2 = g.depthwise_conv_valid(a2, &win);
        let e_b2 = g.depthwise_conv_valid(b2, &win);
        let e_ab = g.depthwise_conv_valid(ab, &win);
        let mu1sq = g.square(mu1);
        let mu2sq = g.square(mu2);
        let mu12 = g.mul(mu1, mu2);
        let v1 = g.sub(e_a2, mu1sq);
        let v2 = g.sub(e_b2, mu2sq);
        let cov = g.sub(e_ab, mu12);
        let cov2 = g.mul_scalar(cov, 2.0);
        let cs_num = g.add_scalar(cov2, C2);
        let vsum = g.add(v1, v2);
        let cs_den = g.add_scalar(vsum, C2);
        let cs = g.div(cs_num, cs_den);
        let factor = if scale + 1 < MSSSIM_SCALES {
            g.mean(cs)
        } else {
            let l_num0 = g.mul_scalar(mu12, 2.0);
            let l_num = g.add_scalar(l_num0, C1);
            let musum = g.add(mu1sq, mu2sq);
            let l_den = g.add_scalar(musum, C1);
            let lum = g.div(l_num, l_den);
            let ssim = g.mul(lum, cs);
            g.mean(ssim)
        };
        // clamp before the fractional power; gradient is zero when pinned
        let pos = g.clamp_min(factor, 1e-6);
        factors.push(g.pow_scalar(pos, MSSSIM_WEIGHTS[scale]));
        if scale + 1 < MSSSIM_SCALES {
            xa = g.avg_pool2(xa);
            xb = g.avg_pool2(xb);
        }
    }
    let mut score = factors[0];
    for f in &factors[1..] {
        score = g.mul(score, *f);
    }
    Ok(score)
}

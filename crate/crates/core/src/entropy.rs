//! Learnable probability models and integer CDF tables.
//!
//! [`FactorizedDensity`] is the univariate non-parametric density used for
//! the coded latent, the common information and the hyper latents: one
//! monotone map c(x) per channel, built from K affine stages with
//! softplus-constrained weights, bounded odd nonlinearities between them and
//! a final sigmoid, so c is a CDF by construction. The noisy (quantization
//! proxy) likelihood of a value v is the bin mass c(v+1/2) - c(v-1/2); the
//! continuous density c'(v) is used for latents that are never quantized.
//!
//! Both quantities exist twice: as graph ops (differentiable w.r.t. the
//! input and the stage parameters; the density's derivative chain is built
//! into the graph so reverse mode handles the second-order terms) and as
//! plain f64 evaluators used for CDF table construction and as an
//! independent check on the graph path.

use crate::tensor::{normal_cdf, Graph, NodeId, ParamId, Params, Tensor};
use crate::{Error, Result};
use std::f64::consts::LN_2;

/// Likelihoods are floored here before any log.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;
pub const DEFAULT_PRECISION: u8 = 16;
pub const DEFAULT_TAIL_MASS: f64 = 1e-9;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softplus_inv(y: f64) -> f64 {
    // inverse of ln(1 + e^x)
    (y.exp() - 1.0).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-channel monotone CDF c(x) realized as a chain of K affine stages.
///
/// Stage k maps r_{k-1} values to r_k values through a softplus-positive
/// matrix and a bias; between stages the bounded odd nonlinearity
/// `u + a * tanh(u)` (|a| < 1 via tanh reparameterization) keeps the map
/// monotone, and the final scalar passes through a sigmoid. c(-inf) = 0,
/// c(+inf) = 1 and c' >= 0 hold for any parameter values.
#[derive(Clone, Debug)]
pub struct FactorizedDensity {
    pub channels: usize,
    widths: Vec<usize>,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
    gains: Vec<ParamId>,
}

struct StageNodes {
    mat: NodeId,
    bias: NodeId,
    gain: Option<NodeId>,
}

impl FactorizedDensity {
    /// Default configuration: K = 4 stages with hidden widths (3, 3, 3),
    /// initialized so the density starts out logistic with scale ~10.
    pub fn new(params: &mut Params, name: &str, channels: usize) -> Self {
        Self::with_widths(params, name, channels, &[3, 3, 3], 10.0)
    }

    pub fn with_widths(
        params: &mut Params,
        name: &str,
        channels: usize,
        hidden: &[usize],
        init_scale: f64,
    ) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(1);
        widths.extend_from_slice(hidden);
        widths.push(1);
        let stages = widths.len() - 1;
        // With zero biases and zero gains the chain is linear, so the initial
        // CDF is sigmoid(slope * x); pick the per-stage weight so the total
        // slope spreads the density over roughly [-init_scale, init_scale].
        let paths: usize = hidden.iter().product::<usize>().max(1);
        let slope = 9.2 / init_scale;
        let per_stage = (slope / paths as f64).powf(1.0 / stages as f64);
        let raw = softplus_inv(per_stage);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut gains = Vec::new();
        for k in 0..stages {
            let (r_out, r_in) = (widths[k + 1], widths[k]);
            weights.push(params.add(
                &format!("{name}.stage{k}.matrix"),
                Tensor::full(&[channels, r_out, r_in], raw),
            ));
            biases.push(params.add(
                &format!("{name}.stage{k}.bias"),
                Tensor::zeros(&[channels, r_out]),
            ));
            if k + 1 < stages {
                gains.push(params.add(
                    &format!("{name}.stage{k}.gain"),
                    Tensor::zeros(&[channels, r_out]),
                ));
            }
        }
        FactorizedDensity {
            channels,
            widths,
            weights,
            biases,
            gains,
        }
    }

    /// Single-stage chain that is exactly the scale-1 logistic CDF.
    pub fn logistic(params: &mut Params, name: &str, channels: usize) -> Self {
        let weights = vec![params.add(
            &format!("{name}.stage0.matrix"),
            Tensor::full(&[channels, 1, 1], softplus_inv(1.0)),
        )];
        let biases = vec![params.add(
            &format!("{name}.stage0.bias"),
            Tensor::zeros(&[channels, 1]),
        )];
        FactorizedDensity {
            channels,
            widths: vec![1, 1],
            weights,
            biases,
            gains: Vec::new(),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.weights.clone();
        ids.extend_from_slice(&self.biases);
        ids.extend_from_slice(&self.gains);
        ids
    }

    fn stages(&self) -> usize {
        self.widths.len() - 1
    }

    fn bind(&self, g: &mut Graph, params: &Params) -> Vec<StageNodes> {
        (0..self.stages())
            .map(|k| {
                let raw = g.param(params, self.weights[k]);
                let mat = g.softplus(raw);
                let bias = g.param(params, self.biases[k]);
                let gain = (k + 1 < self.stages()).then(|| {
                    let raw = g.param(params, self.gains[k]);
                    g.tanh(raw)
                });
                StageNodes { mat, bias, gain }
            })
            .collect()
    }

    /// Pre-sigmoid logit chain on a `[C, 1, M]` input.
    fn logits(&self, g: &mut Graph, stages: &[StageNodes], x: NodeId) -> NodeId {
        let mut u = x;
        for st in stages {
            u = g.chan_matvec(st.mat, u);
            u = g.add_chan_vec(u, st.bias);
            if let Some(gain) = st.gain {
                let th = g.tanh(u);
                let scaled = g.mul_chan_vec(th, gain);
                u = g.add(u, scaled);
            }
        }
        u
    }

    /// Logit chain carried together with its input derivative, so the
    /// density c'(x) becomes an ordinary graph expression.
    fn logits_dual(&self, g: &mut Graph, stages: &[StageNodes], x: NodeId) -> (NodeId, NodeId) {
        let mut u = x;
        let xshape = g.shape(x).to_vec();
        let mut t = g.constant(&xshape, 1.0);
        for st in stages {
            u = g.chan_matvec(st.mat, u);
            u = g.add_chan_vec(u, st.bias);
            t = g.chan_matvec(st.mat, t);
            if let Some(gain) = st.gain {
                let th = g.tanh(u);
                let scaled = g.mul_chan_vec(th, gain);
                u = g.add(u, scaled);
                // dg/du = 1 + a * (1 - tanh(u)^2)
                let th2 = g.square(th);
                let neg = g.neg(th2);
                let one_m = g.add_scalar(neg, 1.0);
                let term = g.mul_chan_vec(one_m, gain);
                let dg = g.add_scalar(term, 1.0);
                t = g.mul(t, dg);
            }
        }
        (u, t)
    }

    fn channel_view(&self, g: &mut Graph, v: NodeId) -> Result<(NodeId, Vec<usize>)> {
        let shape = g.shape(v).to_vec();
        if shape.is_empty() || shape[0] != self.channels {
            return Err(Error::Shape(format!(
                "expected a [C, ...] tensor with C={}, got {:?}",
                self.channels, shape
            )));
        }
        let m = g.numel(v) / self.channels;
        Ok((g.reshape(v, &[self.channels, 1, m]), shape))
    }

    /// Bin mass of the additive-noise model: p(v) = c(v+1/2) - c(v-1/2),
    /// floored at 1e-9. Differentiable w.r.t. v and the stage parameters.
    pub fn noisy_likelihood(&self, g: &mut Graph, params: &Params, v: NodeId) -> Result<NodeId> {
        let (x, shape) = self.channel_view(g, v)?;
        let stages = self.bind(g, params);
        let hi_in = g.add_scalar(x, 0.5);
        let lo_in = g.add_scalar(x, -0.5);
        let l_hi = self.logits(g, &stages, hi_in);
        let l_lo = self.logits(g, &stages, lo_in);
        let s_hi = g.sigmoid(l_hi);
        let s_lo = g.sigmoid(l_lo);
        let diff = g.sub(s_hi, s_lo);
        let floored = g.clamp_min(diff, LIKELIHOOD_FLOOR);
        Ok(g.reshape(floored, &shape))
    }

    /// Continuous density c'(v), floored at 1e-9; used for latents that are
    /// never quantized, so it never feeds the coder.
    pub fn density(&self, g: &mut Graph, params: &Params, v: NodeId) -> Result<NodeId> {
        let (x, shape) = self.channel_view(g, v)?;
        let stages = self.bind(g, params);
        let (l, dl) = self.logits_dual(g, &stages, x);
        let s = g.sigmoid(l);
        let neg = g.neg(s);
        let one_m = g.add_scalar(neg, 1.0);
        let dsig = g.mul(s, one_m);
        let dens = g.mul(dsig, dl);
        let floored = g.clamp_min(dens, LIKELIHOOD_FLOOR);
        Ok(g.reshape(floored, &shape))
    }

    /// Plain-f64 evaluation of (c(x), c'(x)) for one channel.
    fn eval(&self, params: &Params, channel: usize, x: f64) -> (f64, f64) {
        let stages = self.stages();
        let mut u = vec![x];
        let mut t = vec![1.0];
        for k in 0..stages {
            let (r_out, r_in) = (self.widths[k + 1], self.widths[k]);
            let m = params.get(self.weights[k]).data();
            let b = params.get(self.biases[k]).data();
            let mut nu = vec![0.0; r_out];
            let mut nt = vec![0.0; r_out];
            for i in 0..r_out {
                let mut su = b[channel * r_out + i];
                let mut st = 0.0;
                for j in 0..r_in {
                    let w = softplus(m[(channel * r_out + i) * r_in + j]);
                    su += w * u[j];
                    st += w * t[j];
                }
                nu[i] = su;
                nt[i] = st;
            }
            if k + 1 < stages {
                let a = params.get(self.gains[k]).data();
                for i in 0..r_out {
                    let gain = (a[channel * r_out + i]).tanh();
                    let th = nu[i].tanh();
                    nt[i] *= 1.0 + gain * (1.0 - th * th);
                    nu[i] += gain * th;
                }
            }
            u = nu;
            t = nt;
        }
        let s = sigmoid(u[0]);
        (s, s * (1.0 - s) * t[0])
    }

    /// CDF value c(x) for one channel (f64 path).
    pub fn cdf(&self, params: &Params, channel: usize, x: f64) -> f64 {
        self.eval(params, channel, x).0
    }

    /// Density c'(x) for one channel (f64 path).
    pub fn density_at(&self, params: &Params, channel: usize, x: f64) -> f64 {
        self.eval(params, channel, x).1
    }

    /// Integer-bin mass c(k+1/2) - c(k-1/2) (f64 path).
    pub fn bin_prob(&self, params: &Params, channel: usize, k: i64) -> f64 {
        self.cdf(params, channel, k as f64 + 0.5) - self.cdf(params, channel, k as f64 - 0.5)
    }

    /// Freeze one integer CDF table per channel.
    pub fn build_tables(
        &self,
        params: &Params,
        precision: u8,
        tail_mass: f64,
    ) -> Result<Vec<CdfTable>> {
        (0..self.channels)
            .map(|ch| {
                build_cdf_table(
                    |x| self.cdf(params, ch, x),
                    precision,
                    tail_mass,
                    max_symbol_budget(precision),
                )
            })
            .collect()
    }
}

/// Noisy Gaussian bin mass p(v) = Phi((v+1/2)/sigma) - Phi((v-1/2)/sigma),
/// floored at 1e-9. `sigma` must be elementwise positive and the same shape
/// as `v`; both stay differentiable.
pub fn gaussian_noisy_likelihood(g: &mut Graph, v: NodeId, sigma: NodeId) -> NodeId {
    let hi = g.add_scalar(v, 0.5);
    let lo = g.add_scalar(v, -0.5);
    let u_hi = g.div(hi, sigma);
    let u_lo = g.div(lo, sigma);
    let c_hi = g.normal_cdf(u_hi);
    let c_lo = g.normal_cdf(u_lo);
    let diff = g.sub(c_hi, c_lo);
    g.clamp_min(diff, LIKELIHOOD_FLOOR)
}

/// Continuous Gaussian density N(v; 0, sigma^2), floored at 1e-9.
pub fn gaussian_density(g: &mut Graph, v: NodeId, sigma: NodeId) -> NodeId {
    let z = g.div(v, sigma);
    let z2 = g.square(z);
    let e = g.mul_scalar(z2, -0.5);
    let ex = g.exp(e);
    let scaled = g.mul_scalar(ex, 1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let dens = g.div(scaled, sigma);
    g.clamp_min(dens, LIKELIHOOD_FLOOR)
}

/// Total information content in bits: sum of -log2 p. Divide by the pixel
/// count to report bits per pixel.
pub fn bits_estimate(g: &mut Graph, probs: NodeId) -> NodeId {
    let l = g.ln(probs);
    let s = g.sum(l);
    g.mul_scalar(s, -1.0 / LN_2)
}

/// f64 twin of [`bits_estimate`].
pub fn bits_from_probs(probs: &[f64]) -> f64 {
    -probs.iter().map(|p| p.ln()).sum::<f64>() / LN_2
}

/// Integer CDF table driving the range coder.
///
/// `cdf` has one entry per symbol boundary: `cdf[0] = 0`,
/// `cdf[num_symbols] = 2^precision`, strictly increasing, so every symbol
/// carries at least one count. Symbol `s` stands for the integer value
/// `offset + s`; the first and last symbols act as escape bins absorbing
/// everything outside the scanned range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    pub offset: i64,
    pub precision: u8,
    pub cdf: Vec<u32>,
}

impl CdfTable {
    /// Allocate integer counts for the given bin probabilities. The counts
    /// sum to exactly 2^precision and every bin keeps at least one count.
    pub fn from_bin_probabilities(probs: &[f64], offset: i64, precision: u8) -> Result<Self> {
        if !(8..=16).contains(&precision) {
            return Err(Error::Coding(format!(
                "precision {precision} outside supported range 8..=16"
            )));
        }
        let n = probs.len();
        let total = 1u64 << precision;
        if n < 1 || n as u64 > total / 2 {
            return Err(Error::Coding(format!(
                "{n} symbols cannot be represented at precision {precision}"
            )));
        }
        let mass: f64 = probs.iter().sum();
        if !(mass.is_finite() && mass > 0.0) || probs.iter().any(|&p| p.is_nan() || p < 0.0) {
            return Err(Error::Coding("invalid bin probabilities".into()));
        }
        let mut counts = vec![0u64; n];
        let mut fracs: Vec<(usize, f64)> = Vec::with_capacity(n);
        let mut assigned = 0u64;
        for (i, &p) in probs.iter().enumerate() {
            let ideal = p / mass * total as f64;
            let fl = ideal.floor();
            counts[i] = fl as u64;
            assigned += counts[i];
            fracs.push((i, ideal - fl));
        }
        // Hand out the remainder by descending fractional part, then make
        // sure no bin is empty by taking counts from the largest bin.
        fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut rem = (total - assigned) as usize;
        let mut cursor = 0usize;
        while rem > 0 {
            counts[fracs[cursor % n].0] += 1;
            cursor += 1;
            rem -= 1;
        }
        for i in 0..n {
            if counts[i] == 0 {
                let donor = (0..n).max_by_key(|&j| counts[j]).unwrap();
                debug_assert!(counts[donor] > 1);
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
        let mut cdf = Vec::with_capacity(n + 1);
        let mut acc = 0u64;
        cdf.push(0);
        for &c in &counts {
            acc += c;
            cdf.push(acc as u32);
        }
        debug_assert_eq!(acc, total);
        Ok(CdfTable {
            offset,
            precision,
            cdf,
        })
    }

    pub fn num_symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    /// Map an integer value onto a symbol index, clamping outliers into the
    /// escape bins at either end.
    pub fn symbol_of(&self, value: i64) -> usize {
        let idx = value - self.offset;
        idx.clamp(0, self.num_symbols() as i64 - 1) as usize
    }

    pub fn value_of(&self, symbol: usize) -> i64 {
        self.offset + symbol as i64
    }

    /// Cumulative bounds of a symbol in coder units.
    pub fn bounds(&self, symbol: usize) -> (u32, u32) {
        (self.cdf[symbol], self.cdf[symbol + 1])
    }

    /// Largest symbol whose cumulative range contains `freq`.
    pub fn find(&self, freq: u32) -> usize {
        // first boundary above freq, then one symbol back
        self.cdf.partition_point(|&c| c <= freq) - 1
    }

    /// Code length of a symbol under this table, in bits.
    pub fn symbol_bits(&self, symbol: usize) -> f64 {
        let (lo, hi) = self.bounds(symbol);
        self.precision as f64 - ((hi - lo) as f64).log2()
    }
}

pub fn max_symbol_budget(precision: u8) -> usize {
    (1usize << precision) / 4
}

/// Scan a continuous CDF for the integer range holding all but `tail_mass`
/// of the probability, add one escape bin on each side, and quantize the bin
/// masses into a coder table.
pub fn build_cdf_table(
    cdf: impl Fn(f64) -> f64,
    precision: u8,
    tail_mass: f64,
    max_symbols: usize,
) -> Result<CdfTable> {
    if !(tail_mass > 0.0 && tail_mass <= 1e-6) {
        return Err(Error::Coding(format!(
            "tail mass {tail_mass} outside (0, 1e-6]"
        )));
    }
    let half_tail = tail_mass / 2.0;
    // Median by bisection; the range scan starts there.
    let (mut lo, mut hi) = (-1e9f64, 1e9f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let median = (0.5 * (lo + hi)).round() as i64;
    let mut v_min = median;
    let mut steps = 0usize;
    while cdf(v_min as f64 - 0.5) > half_tail {
        v_min -= 1;
        steps += 1;
        if steps > max_symbols {
            return Err(Error::Coding("symbol range exceeds table budget".into()));
        }
    }
    let mut v_max = median;
    steps = 0;
    while 1.0 - cdf(v_max as f64 + 0.5) > half_tail {
        v_max += 1;
        steps += 1;
        if steps > max_symbols {
            return Err(Error::Coding("symbol range exceeds table budget".into()));
        }
    }
    let n = (v_max - v_min + 3) as usize; // in-range bins plus two escapes
    if n > max_symbols {
        return Err(Error::Coding("symbol range exceeds table budget".into()));
    }
    let mut probs = Vec::with_capacity(n);
    probs.push(cdf(v_min as f64 - 0.5)); // everything below the range
    for k in v_min..=v_max {
        probs.push(cdf(k as f64 + 0.5) - cdf(k as f64 - 0.5));
    }
    probs.push(1.0 - cdf(v_max as f64 + 0.5)); // everything above
    CdfTable::from_bin_probabilities(&probs, v_min - 1, precision)
}

/// Conditional Gaussian coder model: a fixed geometric grid of scales, one
/// frozen CDF table per scale. Encoder and decoder map each element's
/// predicted sigma onto the same grid index, so they always agree on tables.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianConditional {
    pub scales: Vec<f64>,
    pub tables: Vec<CdfTable>,
}

pub const SCALE_LEVELS: usize = 64;
pub const SCALE_MIN: f64 = 0.11;
pub const SCALE_MAX: f64 = 256.0;

impl GaussianConditional {
    pub fn new(precision: u8, tail_mass: f64) -> Result<Self> {
        let scales: Vec<f64> = (0..SCALE_LEVELS)
            .map(|i| {
                let t = i as f64 / (SCALE_LEVELS - 1) as f64;
                (SCALE_MIN.ln() + t * (SCALE_MAX / SCALE_MIN).ln()).exp()
            })
            .collect();
        let tables = scales
            .iter()
            .map(|&s| {
                build_cdf_table(
                    |x| normal_cdf(x / s),
                    precision,
                    tail_mass,
                    max_symbol_budget(precision),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GaussianConditional { scales, tables })
    }

    /// Smallest grid scale that is >= sigma (clamped to the grid ends).
    pub fn index_for(&self, sigma: f64) -> usize {
        self.scales
            .partition_point(|&s| s < sigma)
            .min(self.scales.len() - 1)
    }

    pub fn table_for(&self, sigma: f64) -> &CdfTable {
        &self.tables[self.index_for(sigma)]
    }
}

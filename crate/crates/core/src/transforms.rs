//! Analysis, synthesis and hyper transform stacks.
//!
//! The four stack families share one descriptor type:
//!
//! * analysis (`g_ax`, `g_ay`, `f`): four 5x5 convs, stride 2 down, GDN
//!   between them; total downsampling x16.
//! * synthesis (`g_sx`, `g_sy`): four 5x5 transposed convs, stride 2 up,
//!   IGDN between them, 3 output channels; total upsampling x16.
//! * hyper-analysis (`h_ax`, `h_ay`): 3x3 stride 1, then two 5x5 stride 2
//!   down, ReLU between; x4 down.
//! * hyper-synthesis (`h_sx`, `h_sy`): two 5x5 stride 2 up, then 3x3 stride
//!   1, ReLU between; x4 up.
//!
//! GDN coefficients are stored unconstrained and squared on use (beta gets a
//! 1e-6 floor), so the divisive denominator is always positive. Conv weights
//! are fan-in variance-scaled at init, GDN beta starts at 1 and gamma at
//! 0.1*I.

use crate::tensor::{gdn, Graph, NodeId, ParamId, Params, Tensor};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

pub const GDN_BETA_FLOOR: f64 = 1e-6;
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Analysis,
    Synthesis,
    HyperAnalysis,
    HyperSynthesis,
}

/// One layer of a stack. Conv layers own their weights; the activation
/// layers between them are either GDN/IGDN (with their own coefficients) or
/// a plain ReLU.
#[derive(Clone, Debug)]
pub enum Layer {
    Conv {
        weight: ParamId,
        bias: ParamId,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        transposed: bool,
    },
    Gdn {
        beta: ParamId,
        gamma: ParamId,
        channels: usize,
        inverse: bool,
    },
    Relu,
}

#[derive(Clone, Debug)]
pub struct TransformStack {
    pub direction: Direction,
    pub layers: Vec<Layer>,
    pub in_channels: usize,
    pub out_channels: usize,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn conv_layer(
    params: &mut Params,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    transposed: bool,
) -> Layer {
    let fan_in = c_in * kernel * kernel;
    let std = (1.0 / fan_in as f64).sqrt();
    let weight = params.add(
        &format!("{name}.weight"),
        Tensor::from_fn(&[c_out, c_in, kernel, kernel], |_| std * gaussian(rng)),
    );
    let bias = params.add(&format!("{name}.bias"), Tensor::zeros(&[c_out]));
    Layer::Conv {
        weight,
        bias,
        c_in,
        c_out,
        kernel,
        stride,
        transposed,
    }
}

fn gdn_layer(params: &mut Params, name: &str, channels: usize, inverse: bool) -> Layer {
    // Stored values are square roots of the effective coefficients:
    // beta = raw^2 + 1e-6 (~1 at init), gamma = raw^2 (0.1 on the diagonal).
    let beta = params.add(&format!("{name}.beta"), Tensor::full(&[channels], 1.0));
    let gamma = params.add(
        &format!("{name}.gamma"),
        Tensor::from_fn(&[channels, channels], |i| {
            if i % (channels + 1) == 0 {
                0.1f64.sqrt()
            } else {
                0.0
            }
        }),
    );
    Layer::Gdn {
        beta,
        gamma,
        channels,
        inverse,
    }
}

impl TransformStack {
    /// Four stride-2 down convs with GDN between (`g_ax`, `g_ay` and `f`).
    pub fn analysis(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        n: usize,
    ) -> Self {
        let mut layers = Vec::new();
        for i in 0..4 {
            let ci = if i == 0 { c_in } else { n };
            layers.push(conv_layer(params, rng, &format!("{name}.conv{i}"), ci, n, 5, 2, false));
            if i < 3 {
                layers.push(gdn_layer(params, &format!("{name}.gdn{i}"), n, false));
            }
        }
        TransformStack {
            direction: Direction::Analysis,
            layers,
            in_channels: c_in,
            out_channels: n,
        }
    }

    /// Four stride-2 up transposed convs with IGDN between (`g_sx`, `g_sy`).
    pub fn synthesis(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        n: usize,
    ) -> Self {
        let mut layers = Vec::new();
        for i in 0..4 {
            let ci = if i == 0 { c_in } else { n };
            let co = if i == 3 { 3 } else { n };
            layers.push(conv_layer(params, rng, &format!("{name}.conv{i}"), ci, co, 5, 2, true));
            if i < 3 {
                layers.push(gdn_layer(params, &format!("{name}.igdn{i}"), n, true));
            }
        }
        TransformStack {
            direction: Direction::Synthesis,
            layers,
            in_channels: c_in,
            out_channels: 3,
        }
    }

    /// 3x3/1 down, ReLU, 5x5/2 down, ReLU, 5x5/2 down (`h_ax`, `h_ay`).
    pub fn hyper_analysis(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, n: usize) -> Self {
        let layers = vec![
            conv_layer(params, rng, &format!("{name}.conv0"), n, n, 3, 1, false),
            Layer::Relu,
            conv_layer(params, rng, &format!("{name}.conv1"), n, n, 5, 2, false),
            Layer::Relu,
            conv_layer(params, rng, &format!("{name}.conv2"), n, n, 5, 2, false),
        ];
        TransformStack {
            direction: Direction::HyperAnalysis,
            layers,
            in_channels: n,
            out_channels: n,
        }
    }

    /// 5x5/2 up, ReLU, 5x5/2 up, ReLU, 3x3/1 up (`h_sx`, `h_sy`).
    pub fn hyper_synthesis(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, n: usize) -> Self {
        let layers = vec![
            conv_layer(params, rng, &format!("{name}.conv0"), n, n, 5, 2, true),
            Layer::Relu,
            conv_layer(params, rng, &format!("{name}.conv1"), n, n, 5, 2, true),
            Layer::Relu,
            conv_layer(params, rng, &format!("{name}.conv2"), n, n, 3, 1, true),
        ];
        TransformStack {
            direction: Direction::HyperSynthesis,
            layers,
            in_channels: n,
            out_channels: n,
        }
    }

    /// Run the stack on a bound input node.
    pub fn apply(&self, g: &mut Graph, params: &Params, input: NodeId) -> Result<NodeId> {
        let mut x = input;
        for layer in &self.layers {
            x = match layer {
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    transposed,
                    ..
                } => {
                    let w = g.param(params, *weight);
                    let b = g.param(params, *bias);
                    g.conv2d(x, w, Some(b), *stride, *transposed)?
                }
                Layer::Gdn {
                    beta,
                    gamma,
                    inverse,
                    ..
                } => {
                    let braw = g.param(params, *beta);
                    let graw = g.param(params, *gamma);
                    let bsq = g.square(braw);
                    let beta = g.add_scalar(bsq, GDN_BETA_FLOOR);
                    let gamma = g.square(graw);
                    gdn(g, x, beta, gamma, *inverse)?
                }
                Layer::Relu => g.relu(x),
            };
        }
        Ok(x)
    }

    /// Parameter ids owned by this stack, in layer order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { weight, bias, .. } => {
                    ids.push(*weight);
                    ids.push(*bias);
                }
                Layer::Gdn { beta, gamma, .. } => {
                    ids.push(*beta);
                    ids.push(*gamma);
                }
                Layer::Relu => {}
            }
        }
        ids
    }
}

fn check_divisible(shape: &[usize], by: usize) -> Result<()> {
    if shape.len() != 3 || shape[1] % by != 0 || shape[2] % by != 0 || shape[1] == 0 || shape[2] == 0
    {
        return Err(Error::Shape(format!(
            "spatial dims of {shape:?} must be positive and divisible by {by}; pad or crop first"
        )));
    }
    Ok(())
}

/// Latent `v = g_a(x)`: `[C, H, W] -> [N, H/16, W/16]`, H and W divisible by 16.
pub fn analyze(g: &mut Graph, params: &Params, stack: &TransformStack, x: NodeId) -> Result<NodeId> {
    debug_assert_eq!(stack.direction, Direction::Analysis);
    check_divisible(g.shape(x), 16)?;
    stack.apply(g, params, x)
}

/// Reconstruction from concatenated latents: `[C, h, w] -> [3, 16h, 16w]`.
pub fn synthesize(
    g: &mut Graph,
    params: &Params,
    stack: &TransformStack,
    latents: NodeId,
) -> Result<NodeId> {
    debug_assert_eq!(stack.direction, Direction::Synthesis);
    if g.shape(latents)[0] != stack.in_channels {
        return Err(Error::Shape(format!(
            "synthesis expects {} input channels, got {}",
            stack.in_channels,
            g.shape(latents)[0]
        )));
    }
    stack.apply(g, params, latents)
}

/// Common information `w = f(y)`, computed only from the side image.
pub fn common_info(
    g: &mut Graph,
    params: &Params,
    stack: &TransformStack,
    y: NodeId,
) -> Result<NodeId> {
    analyze(g, params, stack, y)
}

/// Hyper latent `z = h_a(|v|)`: `[N, h, w] -> [N, h/4, w/4]`.
pub fn hyper_analyze(
    g: &mut Graph,
    params: &Params,
    stack: &TransformStack,
    v: NodeId,
) -> Result<NodeId> {
    debug_assert_eq!(stack.direction, Direction::HyperAnalysis);
    check_divisible(g.shape(v), 4)?;
    let mag = g.abs(v);
    stack.apply(g, params, mag)
}

/// Per-element scales `sigma = softplus(h_s(z)) + 1e-6 > 0`.
pub fn hyper_synthesize(
    g: &mut Graph,
    params: &Params,
    stack: &TransformStack,
    z: NodeId,
) -> Result<NodeId> {
    debug_assert_eq!(stack.direction, Direction::HyperSynthesis);
    let raw = stack.apply(g, params, z)?;
    let sp = g.softplus(raw);
    Ok(g.add_scalar(sp, SCALE_FLOOR))
}

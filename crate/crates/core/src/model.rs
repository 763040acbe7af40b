//! The distributed codec: transforms plus entropy models, wired for both
//! training and deployment.
//!
//! Dataflow is fixed by the graphical model: the coded latent v_x depends
//! only on the input image x; the common information w = f(y) depends only
//! on the side image y and is recomputed at the decoder, so it costs no
//! rate; the reconstruction depends on (v_x, w). During training the y
//! branch (v_y, y_hat) is carried along so w learns to serve both
//! reconstructions; at inference it never runs.
//!
//! Rates are tracked in bits per pixel. The coded-latent rate uses the
//! noisy bin-mass likelihood; v_y and w are never quantized, so their rate
//! terms use continuous densities. The v_y (and hyper z_y) likelihoods are
//! additionally capped at 1 so these rate terms stay nonnegative; the w
//! term is left uncapped and may go negative, acting purely as the
//! common-information regularizer. Reported bpp counts only bits that cross
//! the channel: the coded latent payload (plus the hyper payload).
//!
//! The training loss is `(R_x [+ R_zx] + lambda D_x) + alpha (R_y [+ R_zy]
//! + lambda D_y) + beta R_w`, with one shared lambda for both distortions.

use crate::bitstream::{pack, unpack, BitstreamHeader};
use crate::coder::{decode_symbols, encode_symbols, quantize};
use crate::entropy::{
    bits_estimate, gaussian_density, gaussian_noisy_likelihood, CdfTable, FactorizedDensity,
    GaussianConditional, LIKELIHOOD_FLOOR,
};
use crate::tensor::{Graph, NodeId, Params, Tensor};
use crate::transforms::{
    analyze, common_info, hyper_analyze, hyper_synthesize, synthesize, TransformStack,
};
use crate::{metrics, Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Factorized,
    Hyperprior,
}

impl Variant {
    pub fn tag(self) -> u8 {
        match self {
            Variant::Factorized => 0,
            Variant::Hyperprior => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Variant::Factorized),
            1 => Ok(Variant::Hyperprior),
            other => Err(Error::Checkpoint(format!("unknown variant tag {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Mse,
    Msssim,
}

impl Metric {
    pub fn tag(self) -> u8 {
        match self {
            Metric::Mse => 0,
            Metric::Msssim => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Metric::Mse),
            1 => Ok(Metric::Msssim),
            other => Err(Error::Checkpoint(format!("unknown metric tag {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Latent channel count N (192 at paper scale, 8..32 at desk scale).
    pub n: usize,
    /// Channels of the common information w; defaults to N.
    pub n_w: usize,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn new(n: usize, variant: Variant) -> Self {
        ModelConfig { n, n_w: n, variant }
    }
}

/// Training metadata carried in the checkpoint so evaluation reports can
/// tag their rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainMeta {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub metric: Metric,
}

impl Default for TrainMeta {
    fn default() -> Self {
        TrainMeta {
            lambda: 1.0,
            alpha: 1.0,
            beta: 1.0,
            metric: Metric::Mse,
        }
    }
}

impl TrainMeta {
    /// Opaque rate-point tag for bitstream headers: log-scaled lambda.
    pub fn lambda_id(&self) -> u16 {
        let l = self.lambda.max(1e-30).log10();
        (l * 1000.0 + 32768.0).clamp(0.0, 65535.0).round() as u16
    }
}

#[derive(Clone, Debug)]
pub struct HyperBlocks {
    pub h_ax: TransformStack,
    pub h_sx: TransformStack,
    pub h_ay: TransformStack,
    pub h_sy: TransformStack,
    pub d_zx: FactorizedDensity,
    pub d_zy: FactorizedDensity,
}

/// Frozen per-channel / per-scale integer CDF tables plus the checkpoint
/// digest they belong to.
#[derive(Clone, Debug)]
pub struct CodingTables {
    pub precision: u8,
    pub tail_mass: f64,
    pub v_tables: Vec<CdfTable>,
    pub z_tables: Vec<CdfTable>,
    pub gaussian: Option<GaussianConditional>,
    pub digest: u64,
}

#[derive(Clone, Debug)]
pub struct WynerModel {
    pub config: ModelConfig,
    pub params: Params,
    pub g_ax: TransformStack,
    pub g_sx: TransformStack,
    pub g_ay: TransformStack,
    pub g_sy: TransformStack,
    pub f: TransformStack,
    pub d_vx: Option<FactorizedDensity>,
    pub d_vy: Option<FactorizedDensity>,
    pub d_w: FactorizedDensity,
    pub hyper: Option<HyperBlocks>,
    pub meta: TrainMeta,
    pub coding: Option<CodingTables>,
}

/// Scalar loss terms, all in bits per pixel except the distortions, which
/// are in the configured metric's units.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub r_x: f64,
    pub r_y: f64,
    pub r_w: f64,
    pub d_x: f64,
    pub d_y: f64,
    pub r_zx: f64,
    pub r_zy: f64,
}

impl LossTerms {
    /// Weighted total: `(R_x + R_zx + lambda D_x) + alpha (R_y + R_zy +
    /// lambda D_y) + beta R_w`.
    pub fn total(&self, lambda: f64, alpha: f64, beta: f64) -> f64 {
        (self.r_x + self.r_zx + lambda * self.d_x)
            + alpha * (self.r_y + self.r_zy + lambda * self.d_y)
            + beta * self.r_w
    }

    pub fn all_finite(&self) -> bool {
        [
            self.r_x, self.r_y, self.r_w, self.d_x, self.d_y, self.r_zx, self.r_zy,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Node handles for the scalar loss terms of one training forward.
#[derive(Clone, Copy, Debug)]
pub struct LossTermNodes {
    pub r_x: NodeId,
    pub r_y: NodeId,
    pub r_w: NodeId,
    pub d_x: NodeId,
    pub d_y: NodeId,
    pub r_zx: Option<NodeId>,
    pub r_zy: Option<NodeId>,
}

/// Everything a training step needs from one forward pass.
pub struct TrainForward {
    pub x_in: NodeId,
    pub y_in: NodeId,
    pub vx_noisy: NodeId,
    pub vy: NodeId,
    pub w: NodeId,
    pub xhat: NodeId,
    pub yhat: NodeId,
    pub p_vx: NodeId,
    pub p_vy: NodeId,
    pub p_w: NodeId,
    pub sigma_x: Option<NodeId>,
    pub sigma_y: Option<NodeId>,
    pub zx_noisy: Option<NodeId>,
    pub zy: Option<NodeId>,
    pub terms: LossTermNodes,
    pub values: LossTerms,
}

/// Which latent feeds the synthesis when decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconstructionMode {
    /// Received latent concatenated with the common information.
    Full,
    /// Received latent zeroed: only decoder-side common information.
    CommonOnly,
    /// Common information zeroed: only the transmitted latent.
    PrivateOnly,
}

fn pixel_count(shape: &[usize]) -> f64 {
    (shape[1] * shape[2]) as f64
}

impl WynerModel {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, n_w) = (config.n, config.n_w);
        let g_ax = TransformStack::analysis(&mut params, &mut rng, "g_ax", 3, n);
        let g_sx = TransformStack::synthesis(&mut params, &mut rng, "g_sx", n + n_w, n);
        let g_ay = TransformStack::analysis(&mut params, &mut rng, "g_ay", 3, n);
        let g_sy = TransformStack::synthesis(&mut params, &mut rng, "g_sy", n + n_w, n);
        let f = TransformStack::analysis(&mut params, &mut rng, "f", 3, n_w);
        let d_w = FactorizedDensity::new(&mut params, "d_w", n_w);
        let (d_vx, d_vy, hyper) = match config.variant {
            Variant::Factorized => (
                Some(FactorizedDensity::new(&mut params, "d_vx", n)),
                Some(FactorizedDensity::new(&mut params, "d_vy", n)),
                None,
            ),
            Variant::Hyperprior => {
                let h_ax = TransformStack::hyper_analysis(&mut params, &mut rng, "h_ax", n);
                let h_sx = TransformStack::hyper_synthesis(&mut params, &mut rng, "h_sx", n);
                let h_ay = TransformStack::hyper_analysis(&mut params, &mut rng, "h_ay", n);
                let h_sy = TransformStack::hyper_synthesis(&mut params, &mut rng, "h_sy", n);
                let d_zx = FactorizedDensity::new(&mut params, "d_zx", n);
                let d_zy = FactorizedDensity::new(&mut params, "d_zy", n);
                (
                    None,
                    None,
                    Some(HyperBlocks {
                        h_ax,
                        h_sx,
                        h_ay,
                        h_sy,
                        d_zx,
                        d_zy,
                    }),
                )
            }
        };
        WynerModel {
            config,
            params,
            g_ax,
            g_sx,
            g_ay,
            g_sy,
            f,
            d_vx,
            d_vy,
            d_w,
            hyper,
            meta: TrainMeta::default(),
            coding: None,
        }
    }

    fn validate_pair(&self, x: &Tensor, y: &Tensor) -> Result<()> {
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "input {:?} and side image {:?} differ",
                x.shape(),
                y.shape()
            )));
        }
        if x.shape().len() != 3 || x.shape()[0] != 3 {
            return Err(Error::Shape(format!("expected [3,H,W], got {:?}", x.shape())));
        }
        Ok(())
    }

    fn distortion(&self, g: &mut Graph, metric: Metric, recon: NodeId, target: NodeId) -> Result<NodeId> {
        Ok(match metric {
            Metric::Mse => {
                let diff = g.sub(recon, target);
                let sq = g.square(diff);
                g.mean(sq)
            }
            Metric::Msssim => {
                let s = metrics::msssim_graph(g, recon, target)?;
                let neg = g.neg(s);
                g.add_scalar(neg, 1.0)
            }
        })
    }

    /// One training forward pass: noisy x branch, clean y branch, rates and
    /// distortions as graph nodes. Inputs are bound as differentiable
    /// leaves so dataflow probes can inspect their gradients.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        x: &Tensor,
        y: &Tensor,
        metric: Metric,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainForward> {
        self.validate_pair(x, y)?;
        let npx = pixel_count(x.shape());
        let x_in = g.var(x);
        let y_in = g.var(y);

        let v_x = analyze(g, &self.params, &self.g_ax, x_in)?;
        let vx_noisy = g.add_uniform_noise(v_x, rng);
        let w = common_info(g, &self.params, &self.f, y_in)?;
        let cat_x = g.concat_channels(vx_noisy, w)?;
        let xhat = synthesize(g, &self.params, &self.g_sx, cat_x)?;

        // v_y is neither quantized nor noise-perturbed: it never leaves the
        // decoder.
        let vy = analyze(g, &self.params, &self.g_ay, y_in)?;
        let cat_y = g.concat_channels(vy, w)?;
        let yhat = synthesize(g, &self.params, &self.g_sy, cat_y)?;

        let mut sigma_x = None;
        let mut sigma_y = None;
        let mut zx_noisy = None;
        let mut zy_node = None;
        let mut r_zx_node = None;
        let mut r_zy_node = None;

        let (p_vx, p_vy) = match self.config.variant {
            Variant::Factorized => {
                let p_vx = self
                    .d_vx
                    .as_ref()
                    .unwrap()
                    .noisy_likelihood(g, &self.params, vx_noisy)?;
                let dens = self.d_vy.as_ref().unwrap().density(g, &self.params, vy)?;
                let p_vy = g.clamp(dens, LIKELIHOOD_FLOOR, 1.0);
                (p_vx, p_vy)
            }
            Variant::Hyperprior => {
                let hb = self.hyper.as_ref().unwrap();
                let z_x = hyper_analyze(g, &self.params, &hb.h_ax, v_x)?;
                let zx = g.add_uniform_noise(z_x, rng);
                let sx = hyper_synthesize(g, &self.params, &hb.h_sx, zx)?;
                let p_vx = gaussian_noisy_likelihood(g, vx_noisy, sx);
                let p_zx = hb.d_zx.noisy_likelihood(g, &self.params, zx)?;
                let bits_zx = bits_estimate(g, p_zx);
                r_zx_node = Some(g.mul_scalar(bits_zx, 1.0 / npx));

                let z_y = hyper_analyze(g, &self.params, &hb.h_ay, vy)?;
                let sy = hyper_synthesize(g, &self.params, &hb.h_sy, z_y)?;
                let dens_vy = gaussian_density(g, vy, sy);
                let p_vy = g.clamp_max(dens_vy, 1.0);
                let dens_zy = hb.d_zy.density(g, &self.params, z_y)?;
                let p_zy = g.clamp_max(dens_zy, 1.0);
                let bits_zy = bits_estimate(g, p_zy);
                r_zy_node = Some(g.mul_scalar(bits_zy, 1.0 / npx));

                sigma_x = Some(sx);
                sigma_y = Some(sy);
                zx_noisy = Some(zx);
                zy_node = Some(z_y);
                (p_vx, p_vy)
            }
        };
        let p_w = self.d_w.density(g, &self.params, w)?;

        let bits_x = bits_estimate(g, p_vx);
        let r_x = g.mul_scalar(bits_x, 1.0 / npx);
        let bits_y = bits_estimate(g, p_vy);
        let r_y = g.mul_scalar(bits_y, 1.0 / npx);
        let bits_w = bits_estimate(g, p_w);
        let r_w = g.mul_scalar(bits_w, 1.0 / npx);
        let d_x = self.distortion(g, metric, xhat, x_in)?;
        let d_y = self.distortion(g, metric, yhat, y_in)?;

        let terms = LossTermNodes {
            r_x,
            r_y,
            r_w,
            d_x,
            d_y,
            r_zx: r_zx_node,
            r_zy: r_zy_node,
        };
        let values = LossTerms {
            r_x: g.value(r_x)[0],
            r_y: g.value(r_y)[0],
            r_w: g.value(r_w)[0],
            d_x: g.value(d_x)[0],
            d_y: g.value(d_y)[0],
            r_zx: r_zx_node.map(|n| g.value(n)[0]).unwrap_or(0.0),
            r_zy: r_zy_node.map(|n| g.value(n)[0]).unwrap_or(0.0),
        };
        Ok(TrainForward {
            x_in,
            y_in,
            vx_noisy,
            vy,
            w,
            xhat,
            yhat,
            p_vx,
            p_vy,
            p_w,
            sigma_x,
            sigma_y,
            zx_noisy,
            zy: zy_node,
            terms,
            values,
        })
    }

    /// Weighted scalar loss node over a forward pass.
    pub fn loss_node(
        &self,
        g: &mut Graph,
        fwd: &TrainForward,
        lambda: f64,
        alpha: f64,
        beta: f64,
    ) -> NodeId {
        let t = &fwd.terms;
        let ldx = g.mul_scalar(t.d_x, lambda);
        let mut x_group = g.add(t.r_x, ldx);
        if let Some(rzx) = t.r_zx {
            x_group = g.add(x_group, rzx);
        }
        let ldy = g.mul_scalar(t.d_y, lambda);
        let mut y_group = g.add(t.r_y, ldy);
        if let Some(rzy) = t.r_zy {
            y_group = g.add(y_group, rzy);
        }
        let y_scaled = g.mul_scalar(y_group, alpha);
        let w_scaled = g.mul_scalar(t.r_w, beta);
        let partial = g.add(x_group, y_scaled);
        g.add(partial, w_scaled)
    }

    /// Freeze entropy-coder tables for the current parameters. Required
    /// before [`WynerModel::compress`] / [`WynerModel::decompress`].
    pub fn freeze_coding(&mut self, precision: u8, tail_mass: f64) -> Result<()> {
        let (v_tables, z_tables, gaussian) = match self.config.variant {
            Variant::Factorized => {
                let v = self
                    .d_vx
                    .as_ref()
                    .unwrap()
                    .build_tables(&self.params, precision, tail_mass)?;
                (v, Vec::new(), None)
            }
            Variant::Hyperprior => {
                let hb = self.hyper.as_ref().unwrap();
                let z = hb.d_zx.build_tables(&self.params, precision, tail_mass)?;
                let gauss = GaussianConditional::new(precision, tail_mass)?;
                (Vec::new(), z, Some(gauss))
            }
        };
        self.coding = Some(CodingTables {
            precision,
            tail_mass,
            v_tables,
            z_tables,
            gaussian,
            digest: 0,
        });
        let digest = crate::checkpoint::digest(self);
        self.coding.as_mut().unwrap().digest = digest;
        Ok(())
    }

    fn coding(&self) -> Result<&CodingTables> {
        self.coding
            .as_ref()
            .ok_or_else(|| Error::Coding("model has no frozen coding tables; train first".into()))
    }

    /// Latent of the input image (pure forward, no noise).
    fn eval_latent(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xi = g.leaf(x);
        let v = analyze(&mut g, &self.params, &self.g_ax, xi)?;
        Ok(g.tensor(v))
    }

    /// Compress one `[3,H,W]` image (pixels in [0,1]) into container bytes.
    pub fn compress(&self, x: &Tensor) -> Result<Vec<u8>> {
        let coding = self.coding()?;
        if x.shape().len() != 3 || x.shape()[0] != 3 {
            return Err(Error::Shape(format!("expected [3,H,W], got {:?}", x.shape())));
        }
        let (h, w) = (x.shape()[1], x.shape()[2]);
        if h > u16::MAX as usize || w > u16::MAX as usize {
            return Err(Error::Shape("image dimensions exceed header range".into()));
        }
        let v = self.eval_latent(x)?;
        let symbols = quantize(&v);
        let (lh, lw) = (v.shape()[1], v.shape()[2]);
        let per_chan = lh * lw;
        let payloads = match self.config.variant {
            Variant::Factorized => {
                let table_of: Vec<usize> = (0..symbols.len()).map(|i| i / per_chan).collect();
                vec![encode_symbols(&symbols, &table_of, &coding.v_tables)?]
            }
            Variant::Hyperprior => {
                let hb = self.hyper.as_ref().unwrap();
                let gauss = coding.gaussian.as_ref().unwrap();
                let mut g = Graph::new();
                let vi = g.leaf(&v);
                let z = hyper_analyze(&mut g, &self.params, &hb.h_ax, vi)?;
                let z_symbols = quantize(&g.tensor(z));
                let z_shape = g.shape(z).to_vec();
                let z_per_chan = z_shape[1] * z_shape[2];
                let z_table_of: Vec<usize> =
                    (0..z_symbols.len()).map(|i| i / z_per_chan).collect();
                let z_payload = encode_symbols(&z_symbols, &z_table_of, &coding.z_tables)?;
                // sigma comes from the quantized hyper latent, exactly as
                // the decoder will recompute it
                let z_hat = Tensor::new(
                    z_shape,
                    z_symbols.iter().map(|&s| s as f64).collect(),
                )?;
                let zi = g.leaf(&z_hat);
                let sigma = hyper_synthesize(&mut g, &self.params, &hb.h_sx, zi)?;
                let table_of: Vec<usize> = g
                    .value(sigma)
                    .iter()
                    .map(|&s| gauss.index_for(s))
                    .collect();
                let payload = encode_symbols(&symbols, &table_of, &gauss.tables)?;
                vec![payload, z_payload]
            }
        };
        let header = BitstreamHeader {
            variant: self.config.variant.tag(),
            lambda_id: self.meta.lambda_id(),
            image_h: h as u16,
            image_w: w as u16,
            latent_channels: self.config.n as u16,
            checkpoint_id: coding.digest,
        };
        pack(&header, &payloads)
    }

    /// Decode container bytes back into the transmitted latent.
    fn decode_latent(&self, bytes: &[u8]) -> Result<(BitstreamHeader, Tensor)> {
        let coding = self.coding()?;
        let bs = unpack(bytes)?;
        let header = bs.header.clone();
        if header.variant != self.config.variant.tag() {
            return Err(Error::Bitstream(format!(
                "bitstream variant {} does not match model variant {}",
                header.variant,
                self.config.variant.tag()
            )));
        }
        if header.latent_channels as usize != self.config.n {
            return Err(Error::Bitstream(format!(
                "bitstream has {} latent channels, model has {}",
                header.latent_channels, self.config.n
            )));
        }
        if header.checkpoint_id != coding.digest {
            return Err(Error::Checksum(format!(
                "bitstream was produced by checkpoint {:016x}, this model is {:016x}",
                header.checkpoint_id, coding.digest
            )));
        }
        let (h, w) = (header.image_h as usize, header.image_w as usize);
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::Bitstream("header dims not divisible by 16".into()));
        }
        let (lh, lw) = (h / 16, w / 16);
        let n = self.config.n;
        let per_chan = lh * lw;
        let values = match self.config.variant {
            Variant::Factorized => {
                let table_of: Vec<usize> = (0..n * per_chan).map(|i| i / per_chan).collect();
                decode_symbols(&bs.payloads[0], &table_of, &coding.v_tables)?
            }
            Variant::Hyperprior => {
                let hb = self.hyper.as_ref().unwrap();
                let gauss = coding.gaussian.as_ref().unwrap();
                if lh % 4 != 0 || lw % 4 != 0 {
                    return Err(Error::Bitstream(
                        "hyperprior bitstream needs latent dims divisible by 4".into(),
                    ));
                }
                let (zh, zw) = (lh / 4, lw / 4);
                let z_per_chan = zh * zw;
                let z_table_of: Vec<usize> =
                    (0..n * z_per_chan).map(|i| i / z_per_chan).collect();
                let z_vals = decode_symbols(&bs.payloads[1], &z_table_of, &coding.z_tables)?;
                let z_hat = Tensor::new(
                    vec![n, zh, zw],
                    z_vals.iter().map(|&s| s as f64).collect(),
                )?;
                let mut g = Graph::new();
                let zi = g.leaf(&z_hat);
                let sigma = hyper_synthesize(&mut g, &self.params, &hb.h_sx, zi)?;
                let table_of: Vec<usize> = g
                    .value(sigma)
                    .iter()
                    .map(|&s| gauss.index_for(s))
                    .collect();
                decode_symbols(&bs.payloads[0], &table_of, &gauss.tables)?
            }
        };
        let latent = Tensor::new(
            vec![n, lh, lw],
            values.iter().map(|&s| s as f64).collect(),
        )?;
        Ok((header, latent))
    }

    /// Reconstruct from container bytes and the decoder-side image.
    pub fn decompress(&self, bytes: &[u8], y: &Tensor) -> Result<Tensor> {
        self.decompress_mode(bytes, y, ReconstructionMode::Full)
    }

    /// Reconstruction with one of the two latent streams optionally zeroed,
    /// which splits the output into its common / private contributions.
    pub fn decompress_mode(
        &self,
        bytes: &[u8],
        y: &Tensor,
        mode: ReconstructionMode,
    ) -> Result<Tensor> {
        let (header, mut latent) = self.decode_latent(bytes)?;
        let (h, w) = (header.image_h as usize, header.image_w as usize);
        if y.shape() != [3, h, w] {
            return Err(Error::Shape(format!(
                "side image {:?} does not match bitstream dims [3, {h}, {w}]",
                y.shape()
            )));
        }
        if mode == ReconstructionMode::CommonOnly {
            latent.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let yi = g.leaf(y);
        let w_node = match mode {
            ReconstructionMode::PrivateOnly => g.constant(&[self.config.n_w, h / 16, w / 16], 0.0),
            _ => common_info(&mut g, &self.params, &self.f, yi)?,
        };
        let vi = g.leaf(&latent);
        let cat = g.concat_channels(vi, w_node)?;
        let xhat = synthesize(&mut g, &self.params, &self.g_sx, cat)?;
        let out = g.clamp(xhat, 0.0, 1.0);
        Ok(g.tensor(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_model(variant: Variant) -> WynerModel {
        let mut m = WynerModel::new(
            ModelConfig {
                n: 4,
                n_w: 4,
                variant,
            },
            11,
        );
        m.freeze_coding(16, 1e-9).unwrap();
        m
    }

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // smooth-ish image in [0,1]
        Tensor::from_fn(&[3, h, w], |i| {
            let x = (i % w) as f64 / w as f64;
            0.4 + 0.3 * (6.0 * x).sin() * 0.5 + 0.2 * rng.random::<f64>()
        })
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let m = toy_model(Variant::Factorized);
        let (x, y) = (image(1, 32, 64), image(2, 32, 64));
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fwd = m.forward_train(&mut g, &x, &y, Metric::Mse, &mut rng).unwrap();
        assert_eq!(g.shape(fwd.xhat), &[3, 32, 64]);
        assert_eq!(g.shape(fwd.yhat), &[3, 32, 64]);
        assert_eq!(g.shape(fwd.w), &[4, 2, 4]);
        assert!(fwd.values.all_finite());
        assert!(fwd.values.r_x >= 0.0);
        assert!(fwd.values.r_y >= 0.0);
        assert!(g.all_finite());
    }

    #[test]
    fn forward_shapes_at_paper_scale_config() {
        // full-size shape audit without training: 128x256 image, N=192
        let m = WynerModel::new(ModelConfig::new(192, Variant::Factorized), 5);
        let (x, y) = (image(7, 128, 256), image(8, 128, 256));
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fwd = m.forward_train(&mut g, &x, &y, Metric::Mse, &mut rng).unwrap();
        assert_eq!(g.shape(fwd.xhat), &[3, 128, 256]);
        assert_eq!(g.shape(fwd.yhat), &[3, 128, 256]);
        assert_eq!(g.shape(fwd.w), &[192, 8, 16]);
    }

    #[test]
    fn markov_dataflow_probes() {
        let m = toy_model(Variant::Factorized);
        let (x, y) = (image(4, 32, 32), image(5, 32, 32));
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fwd = m.forward_train(&mut g, &x, &y, Metric::Mse, &mut rng).unwrap();
        // dw/dx == 0 exactly
        let wsum = g.sum(fwd.w);
        let grads = g.backward(wsum).unwrap();
        assert!(grads.get(fwd.x_in).is_none() || grads.get(fwd.x_in).unwrap().iter().all(|&v| v == 0.0));
        assert!(grads.get(fwd.y_in).unwrap().iter().any(|&v| v != 0.0));
        // dv_x/dy == 0 exactly
        let vsum = g.sum(fwd.vx_noisy);
        let grads = g.backward(vsum).unwrap();
        assert!(grads.get(fwd.y_in).is_none() || grads.get(fwd.y_in).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perturbing_x_leaves_w_and_yhat_unchanged() {
        let m = toy_model(Variant::Factorized);
        let (x, y) = (image(14, 32, 32), image(15, 32, 32));
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(16);
            let fwd = m.forward_train(&mut g, x, &y, Metric::Mse, &mut rng).unwrap();
            (g.value(fwd.w).to_vec(), g.value(fwd.yhat).to_vec())
        };
        let (w1, yhat1) = run(&x);
        let mut x2 = x.clone();
        x2.data_mut()[100] += 0.25;
        let (w2, yhat2) = run(&x2);
        assert_eq!(w1, w2);
        assert_eq!(yhat1, yhat2);
    }

    #[test]
    fn loss_arithmetic() {
        let terms = LossTerms {
            r_x: 2.0,
            d_x: 1.0,
            r_y: 3.0,
            d_y: 2.0,
            r_w: 5.0,
            r_zx: 0.0,
            r_zy: 0.0,
        };
        assert_eq!(terms.total(1.0, 1.0, 1.0), 13.0);
        // alpha = 0 drops the side branch, beta = 0 drops the regularizer
        assert_eq!(terms.total(1.0, 0.0, 0.0), 3.0);
    }

    #[test]
    fn loss_node_matches_value_combiner() {
        for variant in [Variant::Factorized, Variant::Hyperprior] {
            let m = toy_model(variant);
            let (h, w) = (64, 64);
            let (x, y) = (image(21, h, w), image(22, h, w));
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let fwd = m.forward_train(&mut g, &x, &y, Metric::Mse, &mut rng).unwrap();
            for (lambda, alpha, beta) in [(100.0, 1.0, 1.0), (10.0, 0.0, 0.5), (1.0, 0.3, 0.0)] {
                let node = m.loss_node(&mut g, &fwd, lambda, alpha, beta);
                let want = fwd.values.total(lambda, alpha, beta);
                assert!(
                    (g.value(node)[0] - want).abs() < 1e-9,
                    "variant {variant:?}: node {} vs combiner {want}",
                    g.value(node)[0]
                );
            }
        }
    }

    #[test]
    fn msssim_distortion_trains_through_the_graph() {
        let m = toy_model(Variant::Factorized);
        let (x, y) = (image(91, 112, 112), image(92, 112, 112));
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let fwd = m
            .forward_train(&mut g, &x, &y, Metric::Msssim, &mut rng)
            .unwrap();
        assert!((0.0..=1.0).contains(&fwd.values.d_x), "d_x = {}", fwd.values.d_x);
        let loss = m.loss_node(&mut g, &fwd, 10.0, 1.0, 1.0);
        let grads = g.backward(loss).unwrap();
        // the perceptual distortion reaches the encoder weights
        let enc_norm: f64 = g
            .bindings()
            .iter()
            .filter(|(pid, _)| m.g_ax.param_ids().contains(pid))
            .map(|&(_, nid)| {
                grads
                    .get(nid)
                    .map(|s| s.iter().map(|v| v * v).sum())
                    .unwrap_or(0.0)
            })
            .sum();
        assert!(enc_norm > 0.0 && enc_norm.is_finite());
        // too-small images surface the metric's scale requirement
        let (xs, ys) = (image(94, 32, 64), image(95, 32, 64));
        let mut g2 = Graph::new();
        assert!(m
            .forward_train(&mut g2, &xs, &ys, Metric::Msssim, &mut rng)
            .is_err());
    }

    #[test]
    fn alpha_zero_isolates_side_branch_gradients() {
        let m = toy_model(Variant::Factorized);
        let (x, y) = (image(31, 32, 32), image(32, 32, 32));
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let fwd = m.forward_train(&mut g, &x, &y, Metric::Mse, &mut rng).unwrap();
        let loss = m.loss_node(&mut g, &fwd, 100.0, 0.0, 1.0);
        let grads = g.backward(loss).unwrap();
        let mut side_ids = m.g_ay.param_ids();
        side_ids.extend(m.g_sy.param_ids());
        side_ids.extend(m.d_vy.as_ref().unwrap().param_ids());
        let mut live_ids = m.g_ax.param_ids();
        live_ids.extend(m.f.param_ids());
        for &(pid, nid) in g.bindings() {
            let gnorm: f64 = grads
                .get(nid)
                .map(|s| s.iter().map(|v| v * v).sum())
                .unwrap_or(0.0);
            if side_ids.contains(&pid) {
                assert_eq!(gnorm, 0.0, "side param {} got gradient", m.params.name(pid));
            }
        }
        // sanity: the x branch and f do receive gradient
        let live_norm: f64 = g
            .bindings()
            .iter()
            .filter(|(pid, _)| live_ids.contains(pid))
            .map(|&(_, nid)| {
                grads
                    .get(nid)
                    .map(|s| s.iter().map(|v| v * v).sum())
                    .unwrap_or(0.0)
            })
            .sum();
        assert!(live_norm > 0.0);
    }

    #[test]
    fn compress_decompress_roundtrip_and_determinism() {
        for variant in [Variant::Factorized, Variant::Hyperprior] {
            let m = toy_model(variant);
            let (h, w) = (64, 64);
            let (x, y) = (image(41, h, w), image(42, h, w));
            let b1 = m.compress(&x).unwrap();
            let b2 = m.compress(&x).unwrap();
            assert_eq!(b1, b2, "{variant:?} compression not deterministic");
            let r1 = m.decompress(&b1, &y).unwrap();
            let r2 = m.decompress(&b1, &y).unwrap();
            assert_eq!(r1.data(), r2.data());
            assert_eq!(r1.shape(), &[3, h, w]);
            assert!(r1.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn decoded_latent_equals_encoder_quantization() {
        let m = toy_model(Variant::Factorized);
        let x = image(51, 32, 64);
        let v = m.eval_latent(&x).unwrap();
        let want: Vec<i64> = quantize(&v)
            .iter()
            .enumerate()
            .map(|(i, &q)| {
                let t = &m.coding.as_ref().unwrap().v_tables[i / 8];
                t.value_of(t.symbol_of(q))
            })
            .collect();
        let bytes = m.compress(&x).unwrap();
        let (_, latent) = m.decode_latent(&bytes).unwrap();
        let got: Vec<i64> = latent.data().iter().map(|&f| f as i64).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn side_information_changes_reconstruction() {
        let m = toy_model(Variant::Factorized);
        let (x, y) = (image(61, 32, 32), image(62, 32, 32));
        let bytes = m.compress(&x).unwrap();
        let with_y = m.decompress(&bytes, &y).unwrap();
        let zero_side = Tensor::zeros(&[3, 32, 32]);
        let with_zero = m.decompress(&bytes, &zero_side).unwrap();
        assert_ne!(with_y.data(), with_zero.data());
    }

    #[test]
    fn common_and_private_decompositions_differ() {
        let m = toy_model(Variant::Factorized);
        let (x, y) = (image(71, 32, 32), image(72, 32, 32));
        let bytes = m.compress(&x).unwrap();
        let full = m.decompress_mode(&bytes, &y, ReconstructionMode::Full).unwrap();
        let common = m
            .decompress_mode(&bytes, &y, ReconstructionMode::CommonOnly)
            .unwrap();
        let private = m
            .decompress_mode(&bytes, &y, ReconstructionMode::PrivateOnly)
            .unwrap();
        assert_ne!(full.data(), common.data());
        assert_ne!(full.data(), private.data());
        assert_ne!(common.data(), private.data());
    }

    #[test]
    fn mismatched_checkpoint_is_rejected() {
        let m1 = toy_model(Variant::Factorized);
        let mut m2 = WynerModel::new(
            ModelConfig {
                n: 4,
                n_w: 4,
                variant: Variant::Factorized,
            },
            9999,
        );
        m2.freeze_coding(16, 1e-9).unwrap();
        let (x, y) = (image(81, 32, 32), image(82, 32, 32));
        let bytes = m1.compress(&x).unwrap();
        assert!(matches!(m2.decompress(&bytes, &y), Err(Error::Checksum(_))));
        // corrupted stream is caught by the container CRC
        let mut corrupt = bytes.clone();
        let n = corrupt.len();
        corrupt[n / 2] ^= 0xFF;
        assert!(m1.decompress(&corrupt, &y).is_err());
    }

    #[test]
    fn compress_requires_aligned_dims_and_tables() {
        let m = toy_model(Variant::Factorized);
        let x = image(91, 40, 48);
        assert!(m.compress(&x).is_err());
        let unfrozen = WynerModel::new(
            ModelConfig {
                n: 4,
                n_w: 4,
                variant: Variant::Factorized,
            },
            11,
        );
        assert!(unfrozen.compress(&image(92, 32, 32)).is_err());
    }
}

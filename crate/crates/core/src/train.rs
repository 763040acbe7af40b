//! Optimization: AMSGrad steps, plateau-driven learning-rate decay, and the
//! end-to-end training loop.
//!
//! Training is bit-reproducible: all randomness flows from the config seed
//! through ChaCha streams (weight init, per-epoch data order, quantization
//! noise), validation reuses a fixed noise realization so the plateau signal
//! is not drowned by noise variance, and the loop is single-threaded. A
//! non-finite loss or gradient aborts the run and returns the last
//! validation-time snapshot.

use crate::data::PairSource;
use crate::entropy::{DEFAULT_PRECISION, DEFAULT_TAIL_MASS};
use crate::model::{Metric, ModelConfig, TrainMeta, Variant, WynerModel};
use crate::tensor::{Gradients, Graph, Params};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub metric: Metric,
    pub variant: Variant,
    pub lr: f64,
    pub lr_floor: f64,
    pub plateau_patience: usize,
    pub max_iters: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub n: usize,
    pub n_w: usize,
    pub val_every: u64,
    /// Upper bound on pairs used per validation pass.
    pub val_pairs: usize,
}

impl TrainConfig {
    /// Desk-scale defaults; paper-scale values (N = 192, lr 1e-4, 500K
    /// iterations, batch 1) are reachable by overriding fields.
    pub fn toy(variant: Variant) -> Self {
        TrainConfig {
            lambda: 1000.0,
            alpha: 1.0,
            beta: 1.0,
            metric: Metric::Mse,
            variant,
            lr: 1e-4,
            lr_floor: 1e-7,
            plateau_patience: 5,
            max_iters: 2000,
            batch_size: 1,
            seed: 1,
            n: 8,
            n_w: 8,
            val_every: 500,
            val_pairs: 8,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be > 0".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("alpha and beta must be >= 0".into()));
        }
        if self.lr_floor > self.lr {
            return Err(Error::Config("lr_floor must be <= lr".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.n == 0 || self.n_w == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }
}

/// AMSGrad with bias correction: Adam moments plus an elementwise running
/// maximum of the second moment in the denominator.
pub struct AmsGrad {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    vmax: Vec<Vec<f64>>,
}

impl AmsGrad {
    pub fn new(lr: f64, params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .iter()
            .map(|(_, _, t)| vec![0.0; t.numel()])
            .collect();
        AmsGrad {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros.clone(),
            vmax: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Elementwise running maximum of the second moment (monotone in t).
    pub fn vmax(&self, index: usize) -> &[f64] {
        &self.vmax[index]
    }

    /// Apply one update from per-parameter gradient buffers.
    pub fn step(&mut self, params: &mut Params, grads: &[Vec<f64>]) -> Result<()> {
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {:?} at step {}",
                    params.name(crate::tensor::ParamId(i)),
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let vmax = &mut self.vmax[i];
            let data = params.get_mut(crate::tensor::ParamId(i)).data_mut();
            for e in 0..g.len() {
                m[e] = self.beta1 * m[e] + (1.0 - self.beta1) * g[e];
                v[e] = self.beta2 * v[e] + (1.0 - self.beta2) * g[e] * g[e];
                vmax[e] = vmax[e].max(v[e]);
                let m_hat = m[e] / bc1;
                let v_hat = vmax[e] / bc2;
                data[e] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Divide the learning rate by 10 whenever the validation loss stops
/// improving by more than 1e-4 (relative) for `patience` evaluations in a
/// row; never go below the floor.
pub struct PlateauSchedule {
    pub patience: usize,
    pub floor: f64,
    pub rel_improvement: f64,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(patience: usize, floor: f64) -> Self {
        PlateauSchedule {
            patience,
            floor,
            rel_improvement: 1e-4,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Feed one validation loss; returns the (possibly reduced) rate.
    pub fn observe(&mut self, val_loss: f64, lr: f64) -> f64 {
        if !self.best.is_finite() {
            self.best = val_loss;
            return lr;
        }
        let threshold = self.best - self.rel_improvement * self.best.abs();
        if val_loss < threshold {
            self.best = val_loss;
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            return (lr / 10.0).max(self.floor);
        }
        lr
    }
}

/// One CSV row of the training log.
#[derive(Clone, Copy, Debug)]
pub struct LogRow {
    pub iter: u64,
    pub loss: f64,
    pub r_x: f64,
    pub d_x: f64,
    pub r_y: f64,
    pub d_y: f64,
    pub r_w: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "iter,loss,r_x,d_x,r_y,d_y,r_w,lr";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter, self.loss, self.r_x, self.d_x, self.r_y, self.d_y, self.r_w, self.lr
        )
    }
}

pub struct TrainResult {
    pub model: WynerModel,
    /// Set when the loop aborted on a non-finite loss or gradient; the model
    /// is then the last validation-time snapshot.
    pub diverged_at: Option<u64>,
    pub final_val_loss: f64,
}

fn collect_param_grads(g: &Graph, grads: &Gradients, acc: &mut [Vec<f64>]) {
    for &(pid, nid) in g.bindings() {
        if let Some(slice) = grads.get(nid) {
            let dst = &mut acc[pid.0];
            for (d, s) in dst.iter_mut().zip(slice) {
                *d += s;
            }
        }
    }
}

fn validation_loss(
    model: &WynerModel,
    cfg: &TrainConfig,
    val: &dyn PairSource,
) -> Result<f64> {
    let count = val.len().min(cfg.val_pairs).max(1);
    let mut total = 0.0;
    // fixed noise realization: comparable across validation passes
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f0f);
    for i in 0..count {
        let pair = val.get(i)?;
        let mut g = Graph::new();
        let fwd = model.forward_train(&mut g, &pair.right, &pair.left, cfg.metric, &mut rng)?;
        total += fwd.values.total(cfg.lambda, cfg.alpha, cfg.beta);
    }
    Ok(total / count as f64)
}

/// Train a model from scratch. `log` receives one row per iteration; the
/// returned model carries frozen CDF tables and is ready to code images.
pub fn train(
    cfg: &TrainConfig,
    train_data: &dyn PairSource,
    val_data: &dyn PairSource,
    mut log: impl FnMut(&LogRow),
) -> Result<TrainResult> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let mut model = WynerModel::new(
        ModelConfig {
            n: cfg.n,
            n_w: cfg.n_w,
            variant: cfg.variant,
        },
        cfg.seed,
    );
    model.meta = TrainMeta {
        lambda: cfg.lambda,
        alpha: cfg.alpha,
        beta: cfg.beta,
        metric: cfg.metric,
    };
    let mut opt = AmsGrad::new(cfg.lr, &model.params);
    let mut sched = PlateauSchedule::new(cfg.plateau_patience, cfg.lr_floor);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xab5e_1234);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut epoch = 0u64;
    let mut cursor = 0usize;
    let mut grad_acc: Vec<Vec<f64>> = model
        .params
        .iter()
        .map(|(_, _, t)| vec![0.0; t.numel()])
        .collect();
    let mut in_batch = 0usize;
    let mut snapshot = model.clone();
    let mut last_val = f64::INFINITY;

    let finish = |mut model: WynerModel, diverged_at, last_val| -> Result<TrainResult> {
        model.freeze_coding(DEFAULT_PRECISION, DEFAULT_TAIL_MASS)?;
        Ok(TrainResult {
            model,
            diverged_at,
            final_val_loss: last_val,
        })
    };

    for it in 0..cfg.max_iters {
        if cursor == 0 {
            // fresh deterministic shuffle each epoch
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0xc0de ^ epoch));
            for i in (1..order.len()).rev() {
                let j = shuffle_rng.random_range(0..=i);
                order.swap(i, j);
            }
            epoch += 1;
        }
        let pair = train_data.get(order[cursor])?;
        cursor = (cursor + 1) % order.len();

        let mut g = Graph::new();
        let fwd = model.forward_train(&mut g, &pair.right, &pair.left, cfg.metric, &mut noise_rng)?;
        let loss = model.loss_node(&mut g, &fwd, cfg.lambda, cfg.alpha, cfg.beta);
        let loss_value = g.value(loss)[0];
        if !loss_value.is_finite() || !fwd.values.all_finite() {
            return finish(snapshot, Some(it), last_val);
        }
        let grads = g.backward(loss)?;
        collect_param_grads(&g, &grads, &mut grad_acc);
        in_batch += 1;

        if in_batch == cfg.batch_size {
            if cfg.batch_size > 1 {
                let scale = 1.0 / cfg.batch_size as f64;
                for buf in &mut grad_acc {
                    buf.iter_mut().for_each(|v| *v *= scale);
                }
            }
            if opt.step(&mut model.params, &grad_acc).is_err() {
                return finish(snapshot, Some(it), last_val);
            }
            for buf in &mut grad_acc {
                buf.fill(0.0);
            }
            in_batch = 0;
        }

        log(&LogRow {
            iter: it,
            loss: loss_value,
            r_x: fwd.values.r_x + fwd.values.r_zx,
            d_x: fwd.values.d_x,
            r_y: fwd.values.r_y + fwd.values.r_zy,
            d_y: fwd.values.d_y,
            r_w: fwd.values.r_w,
            lr: opt.lr,
        });

        if (it + 1) % cfg.val_every == 0 || it + 1 == cfg.max_iters {
            let vloss = validation_loss(&model, cfg, val_data)?;
            if !vloss.is_finite() {
                return finish(snapshot, Some(it), last_val);
            }
            last_val = vloss;
            opt.lr = sched.observe(vloss, opt.lr);
            snapshot = model.clone();
        }
    }
    finish(model, None, last_val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticPairs;
    use crate::tensor::{ParamId, Tensor};

    fn one_param(value: f64) -> Params {
        let mut p = Params::new();
        p.add("w", Tensor::new(vec![1], vec![value]).unwrap());
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = one_param(0.0);
        let mut opt = AmsGrad::new(0.1, &params);
        opt.step(&mut params, &[vec![1.0]]).unwrap();
        // bias-corrected first step: m_hat = 1, v_hat = 1
        let got = params.get(ParamId(0)).data()[0];
        assert!((got + 0.1).abs() < 1e-6, "first step moved to {got}");
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut params = one_param(0.37);
        let mut opt = AmsGrad::new(0.1, &params);
        for _ in 0..5 {
            opt.step(&mut params, &[vec![0.0]]).unwrap();
        }
        assert_eq!(params.get(ParamId(0)).data()[0], 0.37);
    }

    #[test]
    fn vmax_is_monotone() {
        let mut params = one_param(0.0);
        let mut opt = AmsGrad::new(0.01, &params);
        let mut prev = 0.0;
        for g in [1.0, 3.0, 0.1, 0.05, 2.0, 0.0] {
            opt.step(&mut params, &[vec![g]]).unwrap();
            let now = opt.vmax(0)[0];
            assert!(now >= prev);
            prev = now;
        }
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut params = one_param(0.0);
        let mut opt = AmsGrad::new(0.1, &params);
        assert!(matches!(
            opt.step(&mut params, &[vec![f64::NAN]]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn plateau_schedule_rules() {
        let mut s = PlateauSchedule::new(3, 1e-7);
        let mut lr = 1e-4;
        // strictly decreasing: unchanged
        for loss in [10.0, 9.0, 8.0, 7.0] {
            lr = s.observe(loss, lr);
        }
        assert_eq!(lr, 1e-4);
        // flat for `patience` evaluations: one division
        for loss in [7.0, 7.0, 7.0] {
            lr = s.observe(loss, lr);
        }
        assert!((lr - 1e-5).abs() < 1e-18);
        // already at the floor: stays there
        let mut s2 = PlateauSchedule::new(1, 1e-7);
        let at_floor = s2.observe(5.0, 1e-7);
        let still = s2.observe(5.0, at_floor);
        assert_eq!(still, 1e-7);
    }

    #[test]
    fn toy_training_reduces_loss() {
        let data = SyntheticPairs::new(5, 24, 16, 32);
        let val = SyntheticPairs::new(6, 4, 16, 32);
        let mut cfg = TrainConfig::toy(Variant::Factorized);
        cfg.n = 8;
        cfg.n_w = 8;
        cfg.max_iters = 2000;
        cfg.lambda = 2000.0;
        cfg.lr = 3e-4;
        let mut first = None;
        let mut last = 0.0;
        let result = train(&cfg, &data, &val, |row| {
            if first.is_none() {
                first = Some(row.loss);
            }
            last = row.loss;
        })
        .unwrap();
        assert!(result.diverged_at.is_none());
        assert!(
            last < first.unwrap(),
            "loss went {} -> {last}",
            first.unwrap()
        );
        assert!(result.model.coding.is_some());
    }

    #[test]
    fn hyperprior_training_smoke() {
        // hyper path needs latent dims divisible by 4: 64x64 -> latent 4x4
        let data = SyntheticPairs::new(21, 6, 64, 64);
        let mut cfg = TrainConfig::toy(Variant::Hyperprior);
        cfg.n = 4;
        cfg.n_w = 4;
        cfg.max_iters = 150;
        cfg.val_every = 75;
        cfg.lambda = 1500.0;
        let mut first = None;
        let mut last = 0.0;
        let result = train(&cfg, &data, &data, |row| {
            if first.is_none() {
                first = Some(row.loss);
            }
            last = row.loss;
        })
        .unwrap();
        assert!(result.diverged_at.is_none());
        assert!(last < first.unwrap());
        let coding = result.model.coding.as_ref().unwrap();
        assert!(!coding.z_tables.is_empty());
        assert!(coding.gaussian.is_some());
        // the frozen model can code and reconstruct
        let pair = data.get(0).unwrap();
        let bytes = result.model.compress(&pair.right).unwrap();
        let xhat = result.model.decompress(&bytes, &pair.left).unwrap();
        assert_eq!(xhat.shape(), pair.right.shape());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = SyntheticPairs::new(9, 6, 16, 32);
        let mut cfg = TrainConfig::toy(Variant::Factorized);
        cfg.n = 4;
        cfg.n_w = 4;
        cfg.max_iters = 60;
        cfg.val_every = 30;
        let run = || {
            let r = train(&cfg, &data, &data, |_| {}).unwrap();
            crate::checkpoint::digest(&r.model)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn alpha_zero_never_touches_side_branch_weights() {
        let data = SyntheticPairs::new(11, 6, 16, 32);
        let mut cfg = TrainConfig::toy(Variant::Factorized);
        cfg.n = 4;
        cfg.n_w = 4;
        cfg.alpha = 0.0;
        cfg.max_iters = 40;
        cfg.val_every = 20;
        let init = WynerModel::new(
            ModelConfig {
                n: 4,
                n_w: 4,
                variant: Variant::Factorized,
            },
            cfg.seed,
        );
        let result = train(&cfg, &data, &data, |_| {}).unwrap();
        let mut side = init.g_ay.param_ids();
        side.extend(init.g_sy.param_ids());
        side.extend(init.d_vy.as_ref().unwrap().param_ids());
        for id in side {
            assert_eq!(
                result.model.params.get(id).data(),
                init.params.get(id).data(),
                "side parameter {} changed under alpha = 0",
                init.params.name(id)
            );
        }
        // while the x branch did move
        let moved = init
            .g_ax
            .param_ids()
            .iter()
            .any(|&id| result.model.params.get(id).data() != init.params.get(id).data());
        assert!(moved);
    }

    #[test]
    fn rates_stay_nonnegative_during_training() {
        let data = SyntheticPairs::new(13, 8, 16, 32);
        let mut cfg = TrainConfig::toy(Variant::Factorized);
        cfg.n = 4;
        cfg.n_w = 4;
        cfg.max_iters = 120;
        cfg.val_every = 60;
        let mut ok = true;
        train(&cfg, &data, &data, |row| {
            ok &= row.r_x >= 0.0 && row.r_y >= 0.0;
        })
        .unwrap();
        assert!(ok);
    }
}

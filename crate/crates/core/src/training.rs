//! Adversarial training: losses, Adam, learning-rate schedule, the
//! alternating D/G step and the checkpointed training loop.
//!
//! Objective: D minimizes binary cross-entropy on real pairs vs generated
//! pairs; G minimizes `−log D(x, G(x)) + λ·|G(x) − y|₁`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Container, Discriminator, DiscriminatorSpec, ForwardCache, Generator, GeneratorSpec, Grads, Network, Real, Tensor};
use crate::pipeline::{assemble, shuffled_order, PreparedSample};

pub const TRACE_FILE: &str = "loss_trace.csv";
pub const TRACE_HEADER: &str = "step,d_loss,g_adv,g_l1,g_total,lr";
pub const FINAL_CHECKPOINT: &str = "final.mtrn";
const CHECKPOINT_KIND: &str = "mtrnet-training";

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("ckpt_epoch_{epoch}.mtrn")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(format!("unknown profile `{other}` (desk, paper)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub lambda_l1: f64,
    pub lr0: f64,
    pub momentum_beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Multiplicative decay applied every two epochs.
    pub lr_decay: f64,
    /// Steps per epoch.
    pub epoch_size: u64,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    pub use_mask: bool,
    pub width_multiplier: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk)
    }
}

impl TrainingConfig {
    pub fn profile(profile: Profile) -> Self {
        let base = TrainingConfig {
            lambda_l1: 100.0,
            lr0: 0.0002,
            momentum_beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            lr_decay: 0.95,
            epoch_size: 500,
            batch_size: 4,
            epochs: 6,
            seed: 0,
            use_mask: true,
            width_multiplier: 0.25,
        };
        match profile {
            Profile::Desk => base,
            Profile::Paper => TrainingConfig {
                epoch_size: 50_000,
                batch_size: 16,
                width_multiplier: 1.0,
                ..base
            },
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs * self.epoch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return bad("lambda_l1 must be finite and >= 0");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be > 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum_beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("adam_epsilon must be > 0");
        }
        if self.epoch_size == 0 || self.batch_size == 0 {
            return bad("epoch_size and batch_size must be positive");
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return bad("width_multiplier must be > 0");
        }
        Ok(())
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec::with_width(self.width_multiplier)
    }

    pub fn discriminator_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec::with_width(self.width_multiplier)
    }
}

/// Learning rate in effect at `step` (0-based).
pub fn lr_at(step: u64, cfg: &TrainingConfig) -> f64 {
    let k = step / (2 * cfg.epoch_size);
    cfg.lr0 * cfg.lr_decay.powi(k.min(i32::MAX as u64) as i32)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

fn mean_of<T: Real>(t: &Tensor<T>, f: impl Fn(f64) -> f64) -> f64 {
    t.data().iter().map(|v| f(v.to_f64().unwrap())).sum::<f64>() / t.len() as f64
}

/// Mean absolute difference over all elements.
pub fn l1_loss<T: Real>(fake: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_same(fake, target)?;
    let s: f64 = fake
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).abs())
        .sum();
    Ok(s / fake.len() as f64)
}

/// Discriminator cross-entropy from logits: real pairs labelled 1, generated
/// pairs labelled 0, averaged over the two terms.
pub fn d_loss<T: Real>(real: &Tensor<T>, fake: &Tensor<T>) -> f64 {
    (mean_of(real, |r| softplus(-r)) + mean_of(fake, softplus)) / 2.0
}

/// Non-saturating generator loss `mean(−log σ(l))`.
pub fn g_adv_loss<T: Real>(fake_logits: &Tensor<T>) -> f64 {
    mean_of(fake_logits, |l| softplus(-l))
}

/// Gradients of [`d_loss`] w.r.t. the real and fake logits.
pub fn d_loss_grad<T: Real>(real: &Tensor<T>, fake: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let nr = 2.0 * real.len() as f64;
    let nf = 2.0 * fake.len() as f64;
    (
        real.map(|r| T::lit((sigmoid(r.to_f64().unwrap()) - 1.0) / nr)),
        fake.map(|f| T::lit(sigmoid(f.to_f64().unwrap()) / nf)),
    )
}

pub fn g_adv_grad<T: Real>(fake_logits: &Tensor<T>) -> Tensor<T> {
    let n = fake_logits.len() as f64;
    fake_logits.map(|l| T::lit((sigmoid(l.to_f64().unwrap()) - 1.0) / n))
}

/// Subgradient of [`l1_loss`] w.r.t. `fake` (0 where equal).
pub fn l1_grad<T: Real>(fake: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    let inv = T::lit(1.0 / fake.len() as f64);
    let data = fake
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            if a > b {
                inv
            } else if a < b {
                -inv
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_vec(fake.shape(), data)
}

/// Mean absolute difference over pixels where `mask` (the input's 4th
/// channel) is positive, on the [−1, 1] scale. `None` when no pixel is
/// masked.
pub fn masked_l1<T: Real>(fake: &Tensor<T>, target: &Tensor<T>, x: &Tensor<T>) -> Option<f64> {
    let [n, c, h, w] = fake.shape();
    let plane = h * w;
    let (mut sum, mut count) = (0.0, 0usize);
    for b in 0..n {
        let m = &x.image(b)[3 * plane..4 * plane];
        let (f, t) = (fake.image(b), target.image(b));
        for p in (0..plane).filter(|&p| m[p] > T::zero()) {
            for ch in 0..c {
                sum += (f[ch * plane + p] - t[ch * plane + p]).abs().to_f64().unwrap();
            }
            count += c;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLoss {
    pub adv: f64,
    pub l1: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub d_loss: f64,
    pub g_adv_loss: f64,
    pub g_l1_loss: f64,
    pub g_total: f64,
    pub lr: f64,
    /// L1 inside the true text mask (even when the network is not shown
    /// the mask); not part of the trace file.
    pub masked_l1: Option<f64>,
}

impl LossReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.d_loss, self.g_adv_loss, self.g_l1_loss, self.g_total, self.lr
        )
    }

    fn is_finite(&self) -> bool {
        [self.d_loss, self.g_adv_loss, self.g_l1_loss, self.g_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `[candidate RGB, input RGB, mask]`.
fn pair<T: Real>(candidate: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    Tensor::concat_channels(candidate, x)
}

fn add_grads<T: Real>(acc: &mut Grads<T>, other: &Grads<T>) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (dst, src) in [
            (&mut a.weight, &b.weight),
            (&mut a.bias, &b.bias),
            (&mut a.gamma, &b.gamma),
            (&mut a.beta, &b.beta),
        ] {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
}

struct DStep<T> {
    loss: f64,
    grads: Grads<T>,
    real_cache: ForwardCache<T>,
    fake_cache: ForwardCache<T>,
}

fn d_step_grads<T: Real>(d: &Discriminator<T>, x: &Tensor<T>, y: &Tensor<T>, fake: &Tensor<T>) -> Result<DStep<T>> {
    let (r, real_cache) = d.forward_train(&pair(y, x))?;
    let (f, fake_cache) = d.forward_train(&pair(fake, x))?;
    let loss = d_loss(&r, &f);
    let (gr, gf) = d_loss_grad(&r, &f);
    let (mut grads, _) = d.backward(&real_cache, gr, false);
    let (gfake, _) = d.backward(&fake_cache, gf, false);
    add_grads(&mut grads, &gfake);
    Ok(DStep {
        loss,
        grads,
        real_cache,
        fake_cache,
    })
}

fn g_step_grads<T: Real>(
    g: &Generator<T>,
    d: &Discriminator<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    fake: &Tensor<T>,
    g_cache: &ForwardCache<T>,
    lambda: f64,
) -> Result<(GeneratorLoss, Grads<T>)> {
    let (logits, d_cache) = d.forward_train(&pair(fake, x))?;
    let adv = g_adv_loss(&logits);
    let l1 = l1_loss(fake, y)?;
    let (_, gz) = d.backward(&d_cache, g_adv_grad(&logits), true);
    let (mut gfake, _) = gz.expect("input gradient requested").split_channels(fake.channels());
    let lam = T::lit(lambda);
    for (g, s) in gfake.data_mut().iter_mut().zip(l1_grad(fake, y).data()) {
        *g = *g + lam * *s;
    }
    let grads = g.backward(g_cache, gfake);
    Ok((
        GeneratorLoss {
            adv,
            l1,
            total: adv + lambda * l1,
        },
        grads,
    ))
}

/// Discriminator loss and its parameter gradients for a batch, with the
/// generator output treated as a constant.
pub fn d_loss_with_grads<T: Real>(g: &Generator<T>, d: &Discriminator<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<(f64, Grads<T>)> {
    let (fake, _) = g.forward_train(x)?;
    let s = d_step_grads(d, x, y, &fake)?;
    Ok((s.loss, s.grads))
}

/// Generator objective and its parameter gradients, through a fixed
/// discriminator.
pub fn g_total_with_grads<T: Real>(
    g: &Generator<T>,
    d: &Discriminator<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    lambda: f64,
) -> Result<(GeneratorLoss, Grads<T>)> {
    let (fake, cache) = g.forward_train(x)?;
    g_step_grads(g, d, x, y, &fake, &cache, lambda)
}

/// Loss-only counterpart of [`d_loss_with_grads`].
pub fn d_loss_value<T: Real>(g: &Generator<T>, d: &Discriminator<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (fake, _) = g.forward_train(x)?;
    let (r, _) = d.forward_train(&pair(y, x))?;
    let (f, _) = d.forward_train(&pair(&fake, x))?;
    Ok(d_loss(&r, &f))
}

/// Loss-only counterpart of [`g_total_with_grads`].
pub fn g_total_value<T: Real>(g: &Generator<T>, d: &Discriminator<T>, x: &Tensor<T>, y: &Tensor<T>, lambda: f64) -> Result<GeneratorLoss> {
    let (fake, _) = g.forward_train(x)?;
    let (logits, _) = d.forward_train(&pair(&fake, x))?;
    let adv = g_adv_loss(&logits);
    let l1 = l1_loss(&fake, y)?;
    Ok(GeneratorLoss {
        adv,
        l1,
        total: adv + lambda * l1,
    })
}

/// First and second moment estimates for every trainable array of one
/// network.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

fn trainable_names<T: Real>(net: &Network<T>) -> Vec<String> {
    net.names()
        .iter()
        .zip(net.layers())
        .flat_map(|(name, layer)| {
            let n = if layer.norm.is_some() { 4 } else { 2 };
            ["weight", "bias", "gamma", "beta"][..n]
                .iter()
                .map(move |s| format!("{name}.{s}"))
        })
        .collect()
}

impl<T: Real> Adam<T> {
    pub fn new(net: &Network<T>) -> Self {
        let m: Vec<Vec<T>> = net
            .layers()
            .iter()
            .flat_map(|l| l.zero_grads().arrays().into_iter().map(<[T]>::to_vec).collect::<Vec<_>>())
            .collect();
        Adam {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &Grads<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.t += 1;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (ob1, ob2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let step = T::lit(lr / bc1);
        let sbc2 = T::lit(bc2.sqrt());
        let eps = T::lit(eps);
        let mut k = 0;
        for (layer, lg) in net.layers_mut().iter_mut().zip(grads) {
            for (param, g) in layer.trainable_mut().into_iter().zip(lg.arrays()) {
                let (m, v) = (&mut self.m[k], &mut self.v[k]);
                for i in 0..param.len() {
                    m[i] = b1 * m[i] + ob1 * g[i];
                    v[i] = b2 * v[i] + ob2 * g[i] * g[i];
                    param[i] = param[i] - step * m[i] / (v[i].sqrt() / sbc2 + eps);
                }
                k += 1;
            }
        }
    }

    fn push_to(&self, c: &mut Container, prefix: &str, net: &Network<T>) {
        for (i, name) in trainable_names(net).into_iter().enumerate() {
            let cvt = |v: &[T]| v.iter().map(|x| x.to_f32().unwrap()).collect::<Vec<f32>>();
            c.push(format!("{prefix}.m.{name}"), vec![self.m[i].len()], cvt(&self.m[i]));
            c.push(format!("{prefix}.v.{name}"), vec![self.v[i].len()], cvt(&self.v[i]));
        }
    }

    fn restore_from(c: &Container, prefix: &str, net: &Network<T>, t: u64, path: &Path) -> Result<Self> {
        let mut adam = Adam::new(net);
        adam.t = t;
        for (i, name) in trainable_names(net).into_iter().enumerate() {
            for (moment, dst) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let key = format!("{prefix}.{moment}.{name}");
                let src = c.get(&key).ok_or_else(|| Error::Checkpoint {
                    path: path.to_path_buf(),
                    reason: format!("missing array `{key}`"),
                })?;
                if src.data.len() != dst.len() {
                    return Err(Error::Checkpoint {
                        path: path.to_path_buf(),
                        reason: format!("array `{key}` has {} values, expected {}", src.data.len(), dst.len()),
                    });
                }
                for (d, &s) in dst.iter_mut().zip(&src.data) {
                    *d = T::from_f32(s).unwrap();
                }
            }
        }
        Ok(adam)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    step: u64,
    config: TrainingConfig,
    generator: GeneratorSpec,
    discriminator: DiscriminatorSpec,
    /// The batch order is a pure function of `(seed, pass)`, so these two
    /// values are the complete sampling state.
    shuffle_seed: u64,
    pass: u64,
}

/// Generator, discriminator, their optimizer state and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer<T: Real = f32> {
    pub config: TrainingConfig,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    adam_g: Adam<T>,
    adam_d: Adam<T>,
    step: u64,
}

/// A training batch. `x` always carries the true mask; the no-mask
/// ablation blanks it inside [`Trainer::train_step`].
pub struct TrainBatch<T = f32> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
}

impl<T: Real> Trainer<T> {
    /// Fresh networks at the configured width and the model resolution.
    pub fn new(config: TrainingConfig) -> Result<Self> {
        let (g, d) = (config.generator_spec(), config.discriminator_spec());
        Self::with_specs(config, g, d)
    }

    pub fn with_specs(config: TrainingConfig, gspec: GeneratorSpec, dspec: DiscriminatorSpec) -> Result<Self> {
        config.validate()?;
        if gspec.input_size != dspec.input_size {
            return Err(Error::Config(format!(
                "generator input size {} differs from discriminator input size {}",
                gspec.input_size, dspec.input_size
            )));
        }
        let generator = Generator::new(gspec, config.seed)?;
        let discriminator = Discriminator::new(dspec, config.seed.wrapping_add(1))?;
        Ok(Trainer {
            adam_g: Adam::new(generator.network()),
            adam_d: Adam::new(discriminator.network()),
            config,
            generator,
            discriminator,
            step: 0,
        })
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn input_size(&self) -> usize {
        self.generator.spec().input_size
    }

    /// One discriminator update (generator output held fixed) followed by
    /// one generator update through the updated, frozen discriminator.
    pub fn train_step(&mut self, batch: &TrainBatch<T>) -> Result<LossReport> {
        let cfg = self.config.clone();
        let step = self.step;
        let lr = lr_at(step, &cfg);
        let mut x = batch.x.clone();
        if !cfg.use_mask {
            let plane = x.plane_len();
            for b in 0..x.batch() {
                x.image_mut(b)[3 * plane..].fill(-T::one());
            }
        }
        let y = &batch.y;

        let (fake, g_cache) = self.generator.forward_train(&x)?;
        let ds = d_step_grads(&self.discriminator, &x, y, &fake)?;
        if !ds.loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("d_loss = {}", ds.loss),
            });
        }
        let dnet = self.discriminator.network_mut();
        self.adam_d
            .step(dnet, &ds.grads, lr, cfg.momentum_beta1, cfg.beta2, cfg.adam_epsilon);
        dnet.update_running_stats(&ds.real_cache);
        dnet.update_running_stats(&ds.fake_cache);

        let (gl, ggrads) = g_step_grads(&self.generator, &self.discriminator, &x, y, &fake, &g_cache, cfg.lambda_l1)?;
        let report = LossReport {
            step,
            d_loss: ds.loss,
            g_adv_loss: gl.adv,
            g_l1_loss: gl.l1,
            g_total: gl.total,
            lr,
            masked_l1: masked_l1(&fake, y, &batch.x),
        };
        if !report.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "d_loss = {}, g_adv = {}, g_l1 = {}",
                    report.d_loss, report.g_adv_loss, report.g_l1_loss
                ),
            });
        }
        let gnet = self.generator.network_mut();
        self.adam_g
            .step(gnet, &ggrads, lr, cfg.momentum_beta1, cfg.beta2, cfg.adam_epsilon);
        gnet.update_running_stats(&g_cache);
        if !gnet.is_finite() || !self.discriminator.network().is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: "parameters became non-finite".into(),
            });
        }
        self.step += 1;
        Ok(report)
    }

    pub fn to_container(&self) -> Container {
        let n = self.config.batch_size as u64;
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            step: self.step,
            config: self.config.clone(),
            generator: self.generator.spec().clone(),
            discriminator: self.discriminator.spec().clone(),
            shuffle_seed: self.config.seed,
            pass: self.step / n.max(1),
        };
        let mut c = Container::new(serde_json::to_value(meta).expect("meta serializes"));
        c.push_network("generator", self.generator.network());
        c.push_network("discriminator", self.discriminator.network());
        self.adam_g.push_to(&mut c, "adam_g", self.generator.network());
        self.adam_d.push_to(&mut c, "adam_d", self.discriminator.network());
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        let meta = read_meta(c, path)?;
        let mut generator = Generator::new(meta.generator, 0)?;
        c.restore_network("generator", generator.network_mut(), path)?;
        let mut discriminator = Discriminator::new(meta.discriminator, 0)?;
        c.restore_network("discriminator", discriminator.network_mut(), path)?;
        let adam_g = Adam::restore_from(c, "adam_g", generator.network(), meta.step, path)?;
        let adam_d = Adam::restore_from(c, "adam_d", discriminator.network(), meta.step, path)?;
        Ok(Trainer {
            config: meta.config,
            generator,
            discriminator,
            adam_g,
            adam_d,
            step: meta.step,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, path)
    }
}

fn read_meta(c: &Container, path: &Path) -> Result<CheckpointMeta> {
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone()).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("unrecognized metadata: {e}"),
    })?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("unexpected checkpoint kind `{}`", meta.kind),
        });
    }
    Ok(meta)
}

/// Loads only the generator of a training checkpoint.
pub fn load_generator(path: &Path) -> Result<Generator<f32>> {
    let c = Container::load(path)?;
    let meta = read_meta(&c, path)?;
    let mut g = Generator::new(meta.generator, 0)?;
    c.restore_network("generator", g.network_mut(), path)?;
    Ok(g)
}

/// Corpus indices of the batch used at `step`: step `k` belongs to pass
/// `k / batches_per_pass`, each pass being a fresh seeded permutation
/// with the trailing partial batch dropped.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_pass = (n / batch_size) as u64;
    assert!(per_pass > 0, "corpus smaller than one batch");
    let order = shuffled_order(n, seed, step / per_pass);
    let i = (step % per_pass) as usize * batch_size;
    order[i..i + batch_size].to_vec()
}

pub fn batch_for_step(corpus: &[PreparedSample], cfg: &TrainingConfig, step: u64) -> TrainBatch<f32> {
    let picked: Vec<&PreparedSample> = batch_indices(corpus.len(), cfg.batch_size, cfg.seed, step)
        .into_iter()
        .map(|i| &corpus[i])
        .collect();
    let (x, y) = assemble(&picked, true);
    TrainBatch { x, y }
}

#[derive(Clone, Debug)]
pub struct LoopOptions {
    pub checkpoint_dir: PathBuf,
    /// Stop after this many total steps even if the configured epochs are
    /// not finished.
    pub max_steps: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct LoopOutcome {
    pub reports: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub trace: PathBuf,
}

/// Rewrites the trace keeping only rows for steps before `step`, so a
/// resumed run continues it without duplicates.
fn open_trace(path: &Path, step: u64) -> Result<BufWriter<fs::File>> {
    let mut kept = vec![TRACE_HEADER.to_string()];
    if step > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            kept.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < step))
                    .map(str::to_string),
            );
        }
    }
    let mut f = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for l in kept {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

impl Trainer<f32> {
    /// Trains from the current step to the end of the configured epochs (or
    /// `max_steps`), appending to the loss trace, saving a checkpoint at
    /// every epoch boundary and a final one at the end.
    pub fn run(
        &mut self,
        corpus: &[PreparedSample],
        opts: &LoopOptions,
        mut observer: impl FnMut(&LossReport),
    ) -> Result<LoopOutcome> {
        let cfg = self.config.clone();
        if corpus.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        if corpus.len() < cfg.batch_size {
            return Err(Error::Config(format!(
                "corpus has {} samples, fewer than batch size {}",
                corpus.len(),
                cfg.batch_size
            )));
        }
        if let Some(p) = corpus.iter().find(|p| p.size as usize != self.input_size()) {
            return Err(Error::shape(
                format!("samples of size {}", self.input_size()),
                format!("sample `{}` of size {}", p.id, p.size),
            ));
        }
        let dir = &opts.checkpoint_dir;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let trace_path = dir.join(TRACE_FILE);
        let mut trace = open_trace(&trace_path, self.step)?;
        let end = opts
            .max_steps
            .map_or(cfg.total_steps(), |m| m.min(cfg.total_steps()));

        let mut reports = Vec::new();
        let mut checkpoints = Vec::new();
        while self.step < end {
            let batch = batch_for_step(corpus, &cfg, self.step);
            let report = match self.train_step(&batch) {
                Ok(r) => r,
                Err(e @ Error::NonFinite { .. }) => {
                    let _ = trace.flush();
                    let snap = dir.join(format!("nonfinite_step_{}.mtrn", self.step));
                    self.save(&snap)?;
                    log::error!("{e}; snapshot written to {}", snap.display());
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            writeln!(trace, "{}", report.csv_row()).map_err(|e| Error::io(&trace_path, e))?;
            observer(&report);
            reports.push(report);
            if self.step.is_multiple_of(cfg.epoch_size) {
                trace.flush().map_err(|e| Error::io(&trace_path, e))?;
                let p = dir.join(epoch_checkpoint_name(self.step / cfg.epoch_size));
                self.save(&p)?;
                checkpoints.push(p);
            }
        }
        trace.flush().map_err(|e| Error::io(&trace_path, e))?;
        let final_checkpoint = dir.join(FINAL_CHECKPOINT);
        self.save(&final_checkpoint)?;
        Ok(LoopOutcome {
            reports,
            checkpoints,
            final_checkpoint,
            trace: trace_path,
        })
    }
}

/// Fresh training run over `corpus` with the configured architecture.
pub fn train_loop(corpus: &[PreparedSample], cfg: &TrainingConfig, opts: &LoopOptions) -> Result<LoopOutcome> {
    let mut trainer = Trainer::<f32>::new(cfg.clone())?;
    trainer.run(corpus, opts, |_| {})
}

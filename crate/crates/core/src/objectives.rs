//! Loss terms of the attack and the blur operator.
//!
//! Every term has a differentiable tensor form used during training. The
//! GAN and margin terms also have plain `f64` forms over score and logit
//! slices, which is what reports and tests consume.
//!
//! Conventions:
//! - L1 distances are summed over all elements of a sample, then averaged
//!   over the batch.
//! - Discriminator scores are clamped to `[LOG_FLOOR, 1 - LOG_FLOOR]`
//!   before taking logarithms.
//! - Margins are `max(margin, -kappa)`, so a sample whose margin is already
//!   past `-kappa` contributes no gradient.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::models::layers::reflect_pad;

pub const LOG_FLOOR: f64 = 1e-7;

/// Weights used by the attack experiments: lambda = 100, alpha = 50, kappa = 5.
pub const DEFAULT_LAMBDA_CYCLE: f64 = 100.0;
pub const DEFAULT_ALPHA_IDENTITY: f64 = 50.0;
pub const DEFAULT_KAPPA: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurConfig {
    pub kernel_size: usize,
    pub sigma: f64,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self {
            kernel_size: 5,
            sigma: 1.0,
        }
    }
}

impl BlurConfig {
    pub fn new(kernel_size: usize, sigma: f64) -> Result<Self> {
        let cfg = Self { kernel_size, sigma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "blur kernel_size must be odd and >= 1, got {}",
                self.kernel_size
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "blur sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Normalised 1-D Gaussian taps. The 2-D kernel is their outer product.
    pub fn kernel_1d(&self) -> Vec<f64> {
        let r = (self.kernel_size / 2) as isize;
        let taps: Vec<f64> = (-r..=r)
            .map(|u| (-((u * u) as f64) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let sum: f64 = taps.iter().sum();
        taps.into_iter().map(|t| t / sum).collect()
    }

    /// Row-major `kernel_size x kernel_size` table.
    pub fn kernel_2d(&self) -> Vec<f64> {
        let k = self.kernel_1d();
        k.iter().flat_map(|a| k.iter().map(move |b| a * b)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttackMode {
    Untargeted,
    Targeted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamSettings {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

impl Default for AdamSettings {
    /// Attack optimiser: learning rate 2e-4 with the usual cycle-consistent
    /// translation moments (0.5, 0.999).
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// How the L1 terms reduce over pixels within one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum L1Reduction {
    /// `||a - b||_1`, the sum of absolute differences.
    Sum,
    /// The sum divided by the number of elements per sample. With the
    /// published weights this is the scale at which the margin term can
    /// compete with the reconstruction terms.
    #[default]
    Mean,
}

impl L1Reduction {
    /// Factor applied to the per-sample sum for samples of `elems` values.
    pub fn scale(self, elems: usize) -> f64 {
        match self {
            L1Reduction::Sum => 1.0,
            L1Reduction::Mean => 1.0 / elems.max(1) as f64,
        }
    }
}

fn default_checkpoint_every() -> usize {
    10
}

/// Omitted fields take the published defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub lambda_cycle: f64,
    pub alpha_identity: f64,
    pub kappa: f64,
    pub mode: AttackMode,
    #[serde(default)]
    pub target_label: Option<usize>,
    #[serde(default)]
    pub blur: BlurConfig,
    #[serde(default)]
    pub additive_delta_scale: f64,
    #[serde(default)]
    pub optimizer: AdamSettings,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub l1_reduction: L1Reduction,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            lambda_cycle: DEFAULT_LAMBDA_CYCLE,
            alpha_identity: DEFAULT_ALPHA_IDENTITY,
            kappa: DEFAULT_KAPPA,
            mode: AttackMode::Untargeted,
            target_label: None,
            blur: BlurConfig::default(),
            additive_delta_scale: 0.0,
            optimizer: AdamSettings::default(),
            epochs: 100,
            batch_size: 1,
            seed: 0,
            checkpoint_every: default_checkpoint_every(),
            l1_reduction: L1Reduction::Mean,
        }
    }
}

impl AttackConfig {
    pub fn targeted(target_label: usize) -> Self {
        Self {
            mode: AttackMode::Targeted,
            target_label: Some(target_label),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if !(self.kappa >= 0.0) {
            return fail(format!("kappa must be >= 0, got {}", self.kappa));
        }
        if !(self.lambda_cycle > 0.0) {
            return fail(format!("lambda_cycle must be > 0, got {}", self.lambda_cycle));
        }
        if !(self.alpha_identity >= 0.0) {
            return fail(format!("alpha_identity must be >= 0, got {}", self.alpha_identity));
        }
        if !(self.additive_delta_scale >= 0.0) {
            return fail("additive_delta_scale must be >= 0".into());
        }
        match (self.mode, self.target_label) {
            (AttackMode::Targeted, None) => return fail("targeted mode needs target_label".into()),
            (AttackMode::Untargeted, Some(_)) => {
                return fail("target_label is only valid in targeted mode".into())
            }
            _ => {}
        }
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return fail("epochs, batch_size and checkpoint_every must be >= 1".into());
        }
        self.blur.validate()?;
        self.optimizer.validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_cycle: self.lambda_cycle,
            alpha_identity: self.alpha_identity,
            kappa: self.kappa,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cycle: f64,
    pub alpha_identity: f64,
    pub kappa: f64,
}

/// Per-term values plus the weighted totals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gan: f64,
    pub cycle: f64,
    pub identity: f64,
    pub cyclegan_total: f64,
    pub adv: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// `cyclegan_total = gan + lambda * cycle + alpha * identity` and
    /// `total = cyclegan_total + adv`.
    pub fn compose(gan: f64, cycle: f64, identity: f64, adv: f64, weights: LossWeights) -> Self {
        let cyclegan_total = gan + weights.lambda_cycle * cycle + weights.alpha_identity * identity;
        Self {
            gan,
            cycle,
            identity,
            cyclegan_total,
            adv,
            total: cyclegan_total + adv,
            weights,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.gan, self.cycle, self.identity, self.adv, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Checks the accounting identities at relative tolerance `tol`.
    pub fn check_invariants(&self, tol: f64) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0);
        let w = self.weights;
        close(
            self.cyclegan_total,
            self.gan + w.lambda_cycle * self.cycle + w.alpha_identity * self.identity,
        ) && close(self.total, self.cyclegan_total + self.adv)
            && self.adv >= -w.kappa - tol * w.kappa.max(1.0)
    }
}

/// Raw per-term values measured on one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub gan: f64,
    pub cycle: f64,
    pub identity: f64,
    pub adv: f64,
}

pub fn total_loss(components: LossComponents, cfg: &AttackConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let c = components;
    let kappa = cfg.kappa;
    if c.adv < -kappa - 1e-6 * kappa.max(1.0) {
        return Err(Error::InvalidConfig(format!(
            "adversarial term {} is below -kappa = {}",
            c.adv, -kappa
        )));
    }
    Ok(LossBreakdown::compose(c.gan, c.cycle, c.identity, c.adv, cfg.weights()))
}

// ---------------------------------------------------------------------------
// GAN term

fn check_scores(scores: &[f64]) -> Result<()> {
    match scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        Some(&s) => Err(Error::ScoreOutOfRange(s)),
        None if scores.is_empty() => Err(Error::ShapeMismatch("empty score batch".into())),
        None => Ok(()),
    }
}

fn mean_log(scores: &[f64], complement: bool) -> f64 {
    scores
        .iter()
        .map(|&s| {
            let s = s.clamp(LOG_FLOOR, 1.0 - LOG_FLOOR);
            if complement {
                (1.0 - s).ln()
            } else {
                s.ln()
            }
        })
        .sum::<f64>()
        / scores.len() as f64
}

/// `E[log D_Y(y)] + E[log(1 - D_Y(G(x)))] + E[log D_X(x)] + E[log(1 - D_X(G_R(y)))]`.
pub fn gan_loss(
    d_x_real: &[f64],
    d_y_real: &[f64],
    d_y_fake: &[f64],
    d_x_fake: &[f64],
) -> Result<f64> {
    for s in [d_x_real, d_y_real, d_y_fake, d_x_fake] {
        check_scores(s)?;
    }
    Ok(mean_log(d_y_real, false)
        + mean_log(d_y_fake, true)
        + mean_log(d_x_real, false)
        + mean_log(d_x_fake, true))
}

fn clamp_scores(s: &Tensor) -> Result<Tensor> {
    Ok(s.clamp(LOG_FLOOR, 1.0 - LOG_FLOOR)?)
}

fn mean_log_t(s: &Tensor) -> Result<Tensor> {
    Ok(clamp_scores(s)?.log()?.mean_all()?)
}

fn mean_log_complement_t(s: &Tensor) -> Result<Tensor> {
    Ok(clamp_scores(s)?.affine(-1.0, 1.0)?.log()?.mean_all()?)
}

/// Tensor form of [`gan_loss`]; each argument is an `(N,)` score vector.
pub fn gan_loss_t(
    d_x_real: &Tensor,
    d_y_real: &Tensor,
    d_y_fake: &Tensor,
    d_x_fake: &Tensor,
) -> Result<Tensor> {
    let a = mean_log_t(d_y_real)?;
    let b = mean_log_complement_t(d_y_fake)?;
    let c = mean_log_t(d_x_real)?;
    let d = mean_log_complement_t(d_x_fake)?;
    Ok((((a + b)? + c)? + d)?)
}

/// Discriminators ascend the GAN term, i.e. descend its negation. Pass
/// detached fake scores so no gradient reaches the generators.
pub fn discriminator_loss_t(
    d_x_real: &Tensor,
    d_y_real: &Tensor,
    d_y_fake: &Tensor,
    d_x_fake: &Tensor,
) -> Result<Tensor> {
    Ok(gan_loss_t(d_x_real, d_y_real, d_y_fake, d_x_fake)?.neg()?)
}

/// Non-saturating generator surrogate: `-E[log D_Y(G(x))] - E[log D_X(G_R(y))]`.
pub fn generator_gan_loss_t(d_y_fake: &Tensor, d_x_fake: &Tensor) -> Result<Tensor> {
    Ok((mean_log_t(d_y_fake)? + mean_log_t(d_x_fake)?)?.neg()?)
}

// ---------------------------------------------------------------------------
// L1 terms

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if a.rank() < 2 {
        return Err(Error::ShapeMismatch(format!("{what}: expected a batch, got {:?}", a.dims())));
    }
    Ok(())
}

/// Per-sample L1 distance summed over all non-batch dimensions, averaged
/// over the batch.
pub fn l1_batch_mean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "l1")?;
    let diff = (a - b.to_dtype(a.dtype())?)?.abs()?;
    Ok(diff.flatten_from(1)?.sum(1)?.mean_all()?)
}

/// `E||G_R(G(x)) - x||_1 + E||G(G_R(y)) - y||_1`.
pub fn cycle_loss(x: &Tensor, x_rec: &Tensor, y: &Tensor, y_rec: &Tensor) -> Result<Tensor> {
    check_same_shape(x, x_rec, "cycle x")?;
    check_same_shape(y, y_rec, "cycle y")?;
    Ok((l1_batch_mean(x_rec, x)? + l1_batch_mean(y_rec, y)?)?)
}

/// `E||G_R(x) - x||_1 + E||G(y) - y||_1`.
pub fn identity_loss(x: &Tensor, g_r_x: &Tensor, y: &Tensor, g_y: &Tensor) -> Result<Tensor> {
    check_same_shape(x, g_r_x, "identity x")?;
    check_same_shape(y, g_y, "identity y")?;
    Ok((l1_batch_mean(g_r_x, x)? + l1_batch_mean(g_y, y)?)?)
}

// ---------------------------------------------------------------------------
// Blur

/// Differentiable Gaussian blur of an `(N, C, H, W)` batch: separable
/// convolution with the normalised kernel and reflect padding.
pub fn gaussian_blur_t(x: &Tensor, cfg: &BlurConfig) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.kernel_size == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    let k = cfg.kernel_size;
    let r = k / 2;
    let taps = Tensor::from_vec(cfg.kernel_1d(), k, x.device())?.to_dtype(x.dtype())?;
    let planes = x.reshape((n * c, 1, h, w))?;
    let padded = reflect_pad(&planes, r, r)?;
    let vertical = padded.conv2d(&taps.reshape((1, 1, k, 1))?, 0, 1, 1, 1)?;
    let both = vertical.conv2d(&taps.reshape((1, 1, 1, k))?, 0, 1, 1, 1)?;
    Ok(both.reshape((n, c, h, w))?)
}

pub fn gaussian_blur(image: &ImageTensor, cfg: &BlurConfig) -> Result<ImageTensor> {
    let t = image.to_tensor(DType::F64, &Device::Cpu)?;
    let out = gaussian_blur_t(&t, cfg)?;
    Ok(crate::image::from_batch_tensor(&out)?.remove(0))
}

// ---------------------------------------------------------------------------
// Margin terms

fn check_logits(logits: &[f64], label: usize) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "need at least two logits, got {}",
            logits.len()
        )));
    }
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: logits.len(),
        });
    }
    Ok(())
}

fn max_excluding(logits: &[f64], skip: usize) -> f64 {
    logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != skip)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `max{Z_l - max_{i != l} Z_i, -kappa}` for the true label `l`.
pub fn adv_loss_untargeted(logits: &[f64], true_label: usize, kappa: f64) -> Result<f64> {
    check_logits(logits, true_label)?;
    let margin = logits[true_label] - max_excluding(logits, true_label);
    Ok(margin.max(-kappa))
}

/// `max{max_{i != t} Z_i - Z_t, -kappa}` for the target label `t`.
pub fn adv_loss_targeted(logits: &[f64], target_label: usize, kappa: f64) -> Result<f64> {
    check_logits(logits, target_label)?;
    let margin = max_excluding(logits, target_label) - logits[target_label];
    Ok(margin.max(-kappa))
}

/// Per-sample margin losses `(N,)` for a logit batch `(N, K)`.
///
/// In untargeted mode `labels` are the true labels; in targeted mode they
/// are the targets.
pub fn adv_loss_t(logits: &Tensor, labels: &[usize], kappa: f64, mode: AttackMode) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if k < 2 {
        return Err(Error::ShapeMismatch(format!("need at least two logits, got {k}")));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: k,
        });
    }
    let mut onehot = vec![0u8; n * k];
    for (row, &l) in labels.iter().enumerate() {
        onehot[row * k + l] = 1;
    }
    let mask = Tensor::from_vec(onehot, (n, k), logits.device())?;
    let picked = (logits * mask.to_dtype(logits.dtype())?)?.sum(D::Minus1)?;
    let floor = Tensor::full(-1e30f64, (n, k), logits.device())?.to_dtype(logits.dtype())?;
    let others = mask.where_cond(&floor, logits)?.max(D::Minus1)?;
    let margin = match mode {
        AttackMode::Untargeted => (picked - others)?,
        AttackMode::Targeted => (others - picked)?,
    };
    Ok(margin.maximum(-kappa)?)
}

/// Uniform noise in `[-scale, scale]` with the shape of `like`; exact zeros
/// when `scale == 0`.
pub fn sample_delta<R: Rng>(like: &Tensor, scale: f64, rng: &mut R) -> Result<Tensor> {
    if scale == 0.0 {
        return Ok(like.zeros_like()?);
    }
    let v: Vec<f64> = (0..like.elem_count())
        .map(|_| rng.random_range(-scale..=scale))
        .collect();
    Ok(Tensor::from_vec(v, like.dims(), like.device())?.to_dtype(like.dtype())?)
}

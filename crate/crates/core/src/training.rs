//! Victim training and joint attack training.
//!
//! The attack couples a cycle-consistent translation pair `G: X -> Y`,
//! `G_R: Y -> X` and their discriminators with a margin loss measured by a
//! frozen victim on `blur(G(x0 + delta))`. Each step updates the
//! discriminators first and then both generators.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::derive_seed;
use crate::dataset::{batch_indices, DatasetManifest, DomainTag};
use crate::error::{Error, Result};
use crate::image::{to_batch_tensor, ImageTensor};
use crate::models::layers::resize_bilinear;
use crate::models::{
    argmax_rows, build_classifier, build_discriminator, build_generator, load_checkpoint,
    save_checkpoint, Checkpoint, CheckpointMeta, Classifier, Discriminator, Generator, NetworkKind,
    NetworkSpec, ParameterSet,
};
use crate::objectives::{
    adv_loss_t, cycle_loss, discriminator_loss_t, gaussian_blur_t, generator_gan_loss_t,
    identity_loss, AdamSettings, AttackConfig, AttackMode, LossBreakdown, LossWeights,
};

// ---------------------------------------------------------------------------
// History

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackEpoch {
    /// Per-term means over the epoch's steps, recomposed with the run weights.
    pub loss: LossBreakdown,
    pub discriminator_loss: f64,
    /// Fraction of attacker images whose blurred translation the victim
    /// classifies as the attack intends, measured after the epoch.
    pub digital_success_rate: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub seed: u64,
    pub config_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ClassifierEpoch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackEpoch>,
    /// Seconds since the run started; null in deterministic mode so that
    /// reruns produce byte-identical files.
    pub wall_clock_secs: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub seed: u64,
    pub config_digest: String,
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn new(seed: u64, config_digest: impl Into<String>) -> Self {
        Self {
            seed,
            config_digest: config_digest.into(),
            records: Vec::new(),
        }
    }

    /// Appends a record; epochs must count up from 1 without gaps.
    pub fn push(&mut self, record: HistoryRecord) -> Result<()> {
        let expected = self.records.len() + 1;
        if record.epoch != expected {
            return Err(Error::InvalidConfig(format!(
                "history expects epoch {expected}, got {}",
                record.epoch
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, epoch: usize) -> Option<&HistoryRecord> {
        self.records.iter().find(|r| r.epoch == epoch)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut history = TrainHistory::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let record: HistoryRecord = serde_json::from_str(line)?;
            if history.is_empty() {
                history.seed = record.seed;
                history.config_digest = record.config_digest.clone();
            }
            history.push(record)?;
        }
        Ok(history)
    }
}

/// Run-level switches shared by both procedures.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Omit wall-clock readings from the history.
    pub deterministic: bool,
    pub config_digest: String,
    /// Where periodic checkpoints go; nothing is written when absent.
    pub checkpoint_dir: Option<PathBuf>,
}

fn adam(vars: Vec<candle_core::Var>, s: &AdamSettings) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr: s.learning_rate,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
            weight_decay: 0.0,
        },
    )?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn load_images(manifest: &DatasetManifest, size: usize) -> Result<(Vec<ImageTensor>, Vec<Option<usize>>)> {
    let samples = manifest.load_samples(size)?;
    Ok(samples.into_iter().map(|s| (s.image, s.label)).unzip())
}

fn index_tensor(idx: &[usize]) -> Result<Tensor> {
    let v: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, idx.len(), &Device::Cpu)?)
}

// ---------------------------------------------------------------------------
// Classifier

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    /// The published schedule: learning rate 1e-5, batch 25, 367 epochs.
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            epochs: 367,
            batch_size: 25,
            init_checkpoint: None,
            seed: 0,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn regime(&self) -> &'static str {
        if self.init_checkpoint.is_some() {
            "pretrained"
        } else {
            "scratch"
        }
    }
}

/// Fraction of `images` the classifier labels correctly, evaluated in chunks.
pub fn accuracy(net: &Classifier, images: &[ImageTensor], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (chunk, truth) in images.chunks(64).zip(labels.chunks(64)) {
        let pred = net.predict(chunk)?;
        correct += pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / images.len() as f64)
}

fn labels_of(manifest: &DatasetManifest, raw: Vec<Option<usize>>) -> Result<Vec<usize>> {
    raw.into_iter()
        .map(|l| {
            l.ok_or_else(|| {
                Error::InvalidConfig(format!("{} has unlabeled entries", manifest.root.display()))
            })
        })
        .collect()
}

/// Softmax cross-entropy training with Adam. Starts from
/// `cfg.init_checkpoint` when given (the pretrained regime), otherwise from a
/// seeded random initialisation.
pub fn train_classifier(
    cfg: &ClassifierTrainConfig,
    train: &DatasetManifest,
    test: &DatasetManifest,
    spec: &NetworkSpec,
    opts: &RunOptions,
) -> Result<(Checkpoint, TrainHistory)> {
    cfg.validate()?;
    spec.validate()?;
    if spec.kind != NetworkKind::Classifier {
        return Err(Error::InvalidConfig(format!("expected a classifier spec, got {:?}", spec.kind)));
    }
    if train.num_classes != test.num_classes || train.num_classes != spec.num_classes {
        return Err(Error::ClassCountMismatch(format!(
            "train has {}, test has {}, network has {} classes",
            train.num_classes, test.num_classes, spec.num_classes
        )));
    }
    train.validate()?;
    test.validate()?;

    let init = cfg.init_checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let net = build_classifier(spec, derive_seed(cfg.seed, "classifier-init"), init.as_ref())?;

    let (train_images, train_labels) = load_images(train, spec.input_size)?;
    let train_labels = labels_of(train, train_labels)?;
    let (test_images, test_labels) = load_images(test, spec.input_size)?;
    let test_labels = labels_of(test, test_labels)?;
    let all_x = to_batch_tensor(&train_images, spec.dtype(), &Device::Cpu)?;
    let all_y = index_tensor(&train_labels)?;

    let mut opt = adam(net.params().all_vars(), &AdamSettings::with_lr(cfg.learning_rate))?;
    let mut history = TrainHistory::new(cfg.seed, opts.config_digest.clone());
    let started = Instant::now();
    for epoch in 1..=cfg.epochs {
        let batches = batch_indices(
            train_images.len(),
            cfg.batch_size,
            true,
            derive_seed(cfg.seed, &format!("classifier-shuffle-{epoch}")),
        )?;
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in &batches {
            let it = index_tensor(idx)?;
            let x = all_x.index_select(&it, 0)?;
            let y = all_y.index_select(&it, 0)?;
            let logits = net.forward(&x)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    what: "classifier cross-entropy".into(),
                });
            }
            opt.backward_step(&loss)?;
            loss_sum += value * idx.len() as f64;
            let pred = argmax_rows(&logits)?;
            correct += pred.iter().zip(idx).filter(|(p, &i)| **p == train_labels[i]).count();
        }
        let n = train_images.len() as f64;
        let stats = ClassifierEpoch {
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            test_accuracy: accuracy(&net.frozen(), &test_images, &test_labels)?,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train acc {:.3} test acc {:.3}",
            stats.train_loss,
            stats.train_accuracy,
            stats.test_accuracy
        );
        history.push(HistoryRecord {
            epoch,
            seed: cfg.seed,
            config_digest: opts.config_digest.clone(),
            classifier: Some(stats),
            attack: None,
            wall_clock_secs: (!opts.deterministic).then(|| started.elapsed().as_secs_f64()),
        })?;
    }
    let final_acc = history
        .records
        .last()
        .and_then(|r| r.classifier.as_ref())
        .map_or(0.0, |c| c.test_accuracy);
    let meta = CheckpointMeta::new(cfg.epochs, cfg.seed, opts.config_digest.clone())
        .with_note("regime", cfg.regime())
        .with_note("test_accuracy", final_acc);
    let ckpt = net.to_checkpoint(meta)?;
    if let Some(dir) = &opts.checkpoint_dir {
        save_checkpoint(&ckpt, &dir.join("classifier.ckpt"))?;
    }
    Ok((ckpt, history))
}

// ---------------------------------------------------------------------------
// Attack

/// Architectures for the two generators and the two discriminators. Both
/// directions share one generator spec and one discriminator spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackNetworks {
    pub generator: NetworkSpec,
    pub discriminator: NetworkSpec,
}

impl AttackNetworks {
    /// Small networks that train in minutes on one CPU core.
    pub fn desk(input_size: usize) -> Self {
        Self {
            generator: NetworkSpec::generator(input_size, 8, 2),
            discriminator: NetworkSpec::discriminator(input_size, 8, 3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.generator.kind != NetworkKind::Generator
            || self.discriminator.kind != NetworkKind::Discriminator
        {
            return Err(Error::InvalidConfig("attack network kinds are swapped".into()));
        }
        if self.generator.input_size != self.discriminator.input_size {
            return Err(Error::InvalidConfig(format!(
                "generator works at {} px but discriminator at {} px",
                self.generator.input_size, self.discriminator.input_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    /// Final `G` (non-makeup to makeup).
    pub generator: Checkpoint,
    /// Final `G_R` (makeup to non-makeup).
    pub generator_r: Checkpoint,
    pub discriminator_x: Checkpoint,
    pub discriminator_y: Checkpoint,
    /// Snapshots of `G` every `checkpoint_every` epochs and at the end.
    pub checkpoints: Vec<Checkpoint>,
    pub history: TrainHistory,
}

/// Validates that `victim` can judge `x_set` under `cfg`.
pub fn check_victim(victim: &Checkpoint, x_set: &DatasetManifest, cfg: &AttackConfig) -> Result<()> {
    let spec = &victim.spec;
    if spec.kind != NetworkKind::Classifier {
        return Err(Error::IncompatibleVictim(format!("victim is a {:?}", spec.kind)));
    }
    if spec.num_classes != x_set.num_classes {
        return Err(Error::IncompatibleVictim(format!(
            "victim has {} classes, attacker data has {}",
            spec.num_classes, x_set.num_classes
        )));
    }
    if let Some(t) = cfg.target_label {
        if t >= spec.num_classes {
            return Err(Error::IncompatibleVictim(format!(
                "target {t} is not one of the victim's {} classes",
                spec.num_classes
            )));
        }
    }
    victim
        .params
        .check_against(spec)
        .map_err(|e| Error::IncompatibleVictim(e.to_string()))
}

/// What the victim sees: `blur(g(x))`, resized to its input size.
pub fn victim_view(generated: &Tensor, blur: &crate::objectives::BlurConfig, victim_size: usize) -> Result<Tensor> {
    let blurred = gaussian_blur_t(generated, blur)?;
    let (_, _, h, w) = blurred.dims4()?;
    if h == victim_size && w == victim_size {
        Ok(blurred)
    } else {
        resize_bilinear(&blurred, victim_size, victim_size)
    }
}

/// Fraction of `images` for which the victim's label on `blur(G(x))` meets
/// the attack goal: differs from the true label (untargeted) or equals the
/// target (targeted).
pub fn digital_success_rate(
    generator: &Generator,
    victim: &Classifier,
    images: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<f64> {
    let n = images.dim(0)?;
    let mut hits = 0;
    for start in (0..n).step_by(16) {
        let len = 16.min(n - start);
        let x = images.narrow(0, start, len)?;
        let view = victim_view(&generator.forward(&x)?.detach(), &cfg.blur, victim.spec().input_size)?;
        let pred = argmax_rows(&victim.forward(&view)?)?;
        hits += pred
            .iter()
            .zip(&labels[start..start + len])
            .filter(|(p, l)| match cfg.mode {
                AttackMode::Untargeted => p != l,
                AttackMode::Targeted => Some(**p) == cfg.target_label,
            })
            .count();
    }
    Ok(hits as f64 / n.max(1) as f64)
}

#[derive(Default)]
struct EpochSums {
    gan: f64,
    cycle: f64,
    identity: f64,
    adv: f64,
    disc: f64,
    steps: usize,
}

struct AttackNets {
    g: Generator,
    gr: Generator,
    dx: Discriminator,
    dy: Discriminator,
}

impl AttackNets {
    fn checkpoints(&self, meta: &CheckpointMeta) -> Result<[Checkpoint; 4]> {
        Ok([
            self.g.to_checkpoint(meta.clone().with_note("role", "G"))?,
            self.gr.to_checkpoint(meta.clone().with_note("role", "G_R"))?,
            self.dx.to_checkpoint(meta.clone().with_note("role", "D_X"))?,
            self.dy.to_checkpoint(meta.clone().with_note("role", "D_Y"))?,
        ])
    }
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("generator_epoch_{epoch:04}.ckpt"))
}

/// Joint attack training. `x_set` holds the attacker's own (labeled,
/// non-makeup) photographs and `y_set` the makeup references. One generator
/// pair is trained per call, i.e. per attacker identity.
pub fn train_attack(
    cfg: &AttackConfig,
    victim: &Checkpoint,
    x_set: &DatasetManifest,
    y_set: &DatasetManifest,
    nets: &AttackNetworks,
    opts: &RunOptions,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    nets.validate()?;
    if y_set.domain_tag != DomainTag::Makeup {
        return Err(Error::InvalidConfig(format!(
            "{} is not a makeup dataset",
            y_set.root.display()
        )));
    }
    if !x_set.domain_tag.is_labeled() {
        return Err(Error::InvalidConfig("attacker images must be labeled".into()));
    }
    check_victim(victim, x_set, cfg)?;
    x_set.validate()?;
    y_set.validate()?;

    let victim_net = Classifier::from_checkpoint(victim)?.frozen();
    let victim_size = victim.spec.input_size;
    let size = nets.generator.input_size;
    let dtype = nets.generator.dtype();

    let (x_images, x_labels) = load_images(x_set, size)?;
    let x_labels = labels_of(x_set, x_labels)?;
    let (y_images, _) = load_images(y_set, size)?;
    let all_x = to_batch_tensor(&x_images, dtype, &Device::Cpu)?;
    let all_y = to_batch_tensor(&y_images, dtype, &Device::Cpu)?;
    let goal_labels: Vec<usize> = match cfg.mode {
        AttackMode::Untargeted => x_labels.clone(),
        AttackMode::Targeted => vec![cfg.target_label.expect("validated"); x_labels.len()],
    };

    let seed = cfg.seed;
    let run = AttackNets {
        g: build_generator(&nets.generator, derive_seed(seed, "G"))?,
        gr: build_generator(&nets.generator, derive_seed(seed, "G_R"))?,
        dx: build_discriminator(&nets.discriminator, derive_seed(seed, "D_X"))?,
        dy: build_discriminator(&nets.discriminator, derive_seed(seed, "D_Y"))?,
    };
    let mut opt_g = adam(
        [run.g.params().all_vars(), run.gr.params().all_vars()].concat(),
        &cfg.optimizer,
    )?;
    let mut opt_d = adam(
        [run.dx.params().all_vars(), run.dy.params().all_vars()].concat(),
        &cfg.optimizer,
    )?;
    let mut y_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "attack-y"));
    let mut delta_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "attack-delta"));
    let weights = cfg.weights();

    let base_meta = CheckpointMeta::new(0, seed, opts.config_digest.clone())
        .with_note("mode", serde_json::to_value(cfg.mode)?)
        .with_note("generators_per_attacker", 1);
    let mut history = TrainHistory::new(seed, opts.config_digest.clone());
    let mut checkpoints = Vec::new();
    let mut last_good: Option<Checkpoint> = None;
    let started = Instant::now();

    for epoch in 1..=cfg.epochs {
        let batches = batch_indices(
            x_images.len(),
            cfg.batch_size,
            true,
            derive_seed(seed, &format!("attack-x-{epoch}")),
        )?;
        let mut sums = EpochSums::default();
        for idx in &batches {
            let x0 = all_x.index_select(&index_tensor(idx)?, 0)?;
            let y_idx: Vec<usize> = (0..idx.len()).map(|_| y_rng.random_range(0..y_images.len())).collect();
            let y = all_y.index_select(&index_tensor(&y_idx)?, 0)?;
            let labels: Vec<usize> = idx.iter().map(|&i| goal_labels[i]).collect();
            let delta = crate::objectives::sample_delta(&x0, cfg.additive_delta_scale, &mut delta_rng)?;
            let x = if cfg.additive_delta_scale > 0.0 {
                (x0 + delta)?.clamp(0.0, 1.0)?
            } else {
                x0
            };

            let fake_y = run.g.forward(&x)?;
            let fake_x = run.gr.forward(&y)?;

            // discriminators: ascend the GAN term on detached fakes
            let d_loss = discriminator_loss_t(
                &run.dx.forward(&x)?,
                &run.dy.forward(&y)?,
                &run.dy.forward(&fake_y.detach())?,
                &run.dx.forward(&fake_x.detach())?,
            )?;
            let d_value = scalar(&d_loss)?;

            // generators: full objective against the refreshed discriminators
            let terms = if d_value.is_finite() {
                opt_d.backward_step(&d_loss)?;
                let gan = generator_gan_loss_t(&run.dy.forward(&fake_y)?, &run.dx.forward(&fake_x)?)?;
                let l1_scale = cfg.l1_reduction.scale(x.elem_count() / x.dim(0)?);
                let cycle = cycle_loss(&x, &run.gr.forward(&fake_y)?, &y, &run.g.forward(&fake_x)?)?
                    .affine(l1_scale, 0.0)?;
                let identity = identity_loss(&x, &run.gr.forward(&x)?, &y, &run.g.forward(&y)?)?
                    .affine(l1_scale, 0.0)?;
                let view = victim_view(&fake_y, &cfg.blur, victim_size)?;
                let logits = victim_net.forward(&view)?;
                let adv = adv_loss_t(&logits, &labels, cfg.kappa, cfg.mode)?
                    .mean_all()?
                    .to_dtype(dtype)?;
                let total = (((&gan + cycle.affine(weights.lambda_cycle, 0.0)?)?
                    + identity.affine(weights.alpha_identity, 0.0)?)?
                    + &adv)?;
                let values = [scalar(&gan)?, scalar(&cycle)?, scalar(&identity)?, scalar(&adv)?, scalar(&total)?];
                values.iter().all(|v| v.is_finite()).then_some((total, values))
            } else {
                None
            };
            let Some((total, [gan, cycle, identity, adv, _])) = terms else {
                if let (Some(dir), Some(ck)) = (&opts.checkpoint_dir, &last_good) {
                    save_checkpoint(ck, &dir.join("generator_last_good.ckpt"))?;
                }
                return Err(Error::Divergence {
                    epoch,
                    what: "non-finite attack loss".into(),
                });
            };
            opt_g.backward_step(&total)?;
            sums.gan += gan;
            sums.cycle += cycle;
            sums.identity += identity;
            sums.adv += adv;
            sums.disc += d_value;
            sums.steps += 1;
        }

        let n = sums.steps as f64;
        let loss = LossBreakdown::compose(sums.gan / n, sums.cycle / n, sums.identity / n, sums.adv / n, weights);
        let success = digital_success_rate(&run.g, &victim_net, &all_x, &x_labels, cfg)?;
        log::info!(
            "epoch {epoch}: gan {:.4} cycle {:.2} identity {:.2} cyclegan {:.2} adv {:.4} total {:.2} success {:.3}",
            loss.gan,
            loss.cycle,
            loss.identity,
            loss.cyclegan_total,
            loss.adv,
            loss.total,
            success
        );
        history.push(HistoryRecord {
            epoch,
            seed,
            config_digest: opts.config_digest.clone(),
            classifier: None,
            attack: Some(AttackEpoch {
                loss,
                discriminator_loss: sums.disc / n,
                digital_success_rate: success,
                steps: sums.steps,
            }),
            wall_clock_secs: (!opts.deterministic).then(|| started.elapsed().as_secs_f64()),
        })?;

        let snapshot = run.g.to_checkpoint(
            CheckpointMeta {
                epoch,
                ..base_meta.clone()
            }
            .with_note("role", "G")
            .with_note("adv", loss.adv)
            .with_note("cycle", loss.cycle),
        )?;
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            if let Some(dir) = &opts.checkpoint_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                save_checkpoint(&snapshot, &checkpoint_path(dir, epoch))?;
            }
            checkpoints.push(snapshot.clone());
        }
        last_good = Some(snapshot);
    }

    let final_meta = CheckpointMeta {
        epoch: cfg.epochs,
        ..base_meta
    };
    let [generator, generator_r, discriminator_x, discriminator_y] = run.checkpoints(&final_meta)?;
    Ok(AttackOutcome {
        generator,
        generator_r,
        discriminator_x,
        discriminator_y,
        checkpoints,
        history,
    })
}

/// Bit-level identity of two parameter sets.
pub fn parameters_identical(a: &ParameterSet, b: &ParameterSet) -> Result<bool> {
    Ok(a.fingerprint()? == b.fingerprint()?)
}

// ---------------------------------------------------------------------------
// Snapshot selection

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Position in the checkpoint list.
    pub index: usize,
    pub epoch: usize,
    /// `adv + lambda * cycle` for the chosen epoch; lower cycle error stands
    /// in for visual naturalness.
    pub score: f64,
    /// Set when no epoch reached the saturated margin `adv = -kappa`.
    pub warning: Option<String>,
}

pub const NO_SUCCESSFUL_EPOCH: &str = "NO_SUCCESSFUL_EPOCH";

fn attack_loss_at(history: &TrainHistory, epoch: usize) -> Result<LossBreakdown> {
    history
        .record(epoch)
        .and_then(|r| r.attack.as_ref())
        .map(|a| a.loss)
        .ok_or_else(|| Error::InvalidConfig(format!("history has no attack record for epoch {epoch}")))
}

fn saturated(loss: &LossBreakdown) -> bool {
    let LossWeights { kappa, .. } = loss.weights;
    loss.adv <= -kappa + 1e-9 * kappa.max(1.0)
}

/// Picks the snapshot to publish. Among epochs whose mean margin term is
/// saturated at `-kappa`, the one minimising `adv + lambda * cycle` wins
/// (earliest on ties). Without any such epoch the lowest `adv` wins, ties
/// going to the lower cycle loss, and the selection carries a warning.
pub fn select_adversarial_snapshot(history: &TrainHistory, checkpoints: &[Checkpoint]) -> Result<Selection> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidConfig("no checkpoints to select from".into()));
    }
    let losses = checkpoints
        .iter()
        .map(|c| attack_loss_at(history, c.meta.epoch))
        .collect::<Result<Vec<_>>>()?;
    let score = |l: &LossBreakdown| l.adv + l.weights.lambda_cycle * l.cycle;

    let successful = losses
        .iter()
        .enumerate()
        .filter(|(_, l)| saturated(l))
        .min_by(|a, b| score(a.1).total_cmp(&score(b.1)));
    if let Some((index, l)) = successful {
        return Ok(Selection {
            index,
            epoch: checkpoints[index].meta.epoch,
            score: score(l),
            warning: None,
        });
    }
    let (index, l) = losses
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.adv.total_cmp(&b.1.adv).then(a.1.cycle.total_cmp(&b.1.cycle)))
        .expect("non-empty");
    log::warn!("no epoch saturated the margin; falling back to the lowest adversarial loss");
    Ok(Selection {
        index,
        epoch: checkpoints[index].meta.epoch,
        score: score(l),
        warning: Some(NO_SUCCESSFUL_EPOCH.into()),
    })
}

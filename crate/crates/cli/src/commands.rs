//! Config resolution, validation and execution for each subcommand.

use std::path::{Path, PathBuf};

use advmakeup::config::write_config_copy;
use advmakeup::dataset::{decode_image, load_image, scan_manifest, DatasetManifest, DomainTag};
use advmakeup::evaluation::{attack_report, emit_report, AttackGoal, FrameSet, Thresholds};
use advmakeup::facepipe::{crop_face, detect_face, detector_from_spec};
use advmakeup::image::{from_batch_tensor, to_batch_tensor};
use advmakeup::models::{
    load_checkpoint, save_checkpoint, Checkpoint, Classifier, Generator, NetworkKind, NetworkSpec,
};
use advmakeup::objectives::{gaussian_blur_t, AttackConfig, AttackMode, BlurConfig, L1Reduction};
use advmakeup::synth::{write_corpus, write_frames, SynthSpec};
use advmakeup::training::{
    check_victim, select_adversarial_snapshot, train_attack as run_attack,
    train_classifier as run_classifier, AttackNetworks, ClassifierTrainConfig, RunOptions,
};
use candle_core::{DType, Device};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{
    DomainArg, EvaluateArgs, GenerateArgs, GlobalArgs, ModeArg, PrepareArgs, ReductionArg, SynthArgs,
    TrainAttackArgs, TrainClassifierArgs,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] advmakeup::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Core(_) => 3,
        }
    }
}

impl From<candle_core::Error> for CliError {
    fn from(e: candle_core::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn load_config<T: DeserializeOwned + Default>(g: &GlobalArgs) -> Result<T> {
    let Some(path) = &g.config else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("bad config {}: {e}", path.display())))
}

fn out_dir(g: &GlobalArgs) -> Result<PathBuf> {
    g.out.clone().ok_or_else(|| invalid("--out is required"))
}

fn existing(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    match path {
        Some(p) if p.exists() => Ok(p.clone()),
        Some(p) => Err(invalid(format!("{what} {} does not exist", p.display()))),
        None => Err(invalid(format!("{what} is required"))),
    }
}

fn set<T: Clone>(slot: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *slot = v.clone();
    }
}

fn set_opt<T: Clone>(slot: &mut Option<T>, flag: &Option<T>) {
    if flag.is_some() {
        *slot = flag.clone();
    }
}

fn mode_of(m: ModeArg) -> AttackMode {
    match m {
        ModeArg::Untargeted => AttackMode::Untargeted,
        ModeArg::Targeted => AttackMode::Targeted,
    }
}

fn load_kind(path: &Path, kind: NetworkKind) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.spec.kind != kind {
        return Err(invalid(format!(
            "{} holds a {:?}, expected a {kind:?}",
            path.display(),
            ckpt.spec.kind
        )));
    }
    Ok(ckpt)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| invalid(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'))
                && p.extension().is_some_and(|x| {
                    matches!(x.to_string_lossy().to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg")
                })
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(advmakeup::Error::EmptyDataset(dir.to_path_buf()).into());
    }
    Ok(files)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(advmakeup::Error::from)? + "\n";
    std::fs::write(path, text).map_err(|e| {
        CliError::Core(advmakeup::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn run_options(g: &GlobalArgs, digest: String, dir: Option<PathBuf>) -> RunOptions {
    RunOptions {
        deterministic: g.deterministic,
        config_digest: digest,
        checkpoint_dir: dir,
    }
}

// ---------------------------------------------------------------------------
// prepare

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareConfig {
    pub raw_dir: Option<PathBuf>,
    pub detector: String,
    pub image_size: usize,
    pub domain: DomainTag,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            raw_dir: None,
            detector: "center-crop".into(),
            image_size: advmakeup::dataset::DEFAULT_IMAGE_SIZE,
            domain: DomainTag::NonMakeup,
        }
    }
}

pub fn prepare(g: &GlobalArgs, a: &PrepareArgs) -> Result<()> {
    let mut cfg: PrepareConfig = load_config(g)?;
    set_opt(&mut cfg.raw_dir, &a.raw_dir);
    set(&mut cfg.detector, &a.detector);
    set(&mut cfg.image_size, &a.image_size);
    if let Some(d) = a.domain {
        cfg.domain = match d {
            DomainArg::NonMakeup => DomainTag::NonMakeup,
            DomainArg::Makeup => DomainTag::Makeup,
            DomainArg::Frame => DomainTag::Frame,
        };
    }
    let out = out_dir(g)?;
    let raw = existing(&cfg.raw_dir, "--raw-dir")?;
    if cfg.image_size == 0 {
        return Err(invalid("image_size must be >= 1"));
    }
    let detector = detector_from_spec(&cfg.detector)?;
    let manifest = scan_manifest(&raw, cfg.domain)?;
    if out.canonicalize().ok() == raw.canonicalize().ok() {
        return Err(invalid("--out must differ from the raw directory"));
    }

    write_config_copy(&out, &cfg)?;
    let mut skipped = Vec::new();
    let mut written = 0;
    for entry in &manifest.entries {
        let src = manifest.full_path(entry);
        let image = decode_image(&src)?;
        let Some(bbox) = detect_face(&detector, &image, Some(&src)) else {
            log::warn!("no face in {}; skipped", src.display());
            skipped.push(entry.path.clone());
            continue;
        };
        let face = crop_face(&image, bbox, cfg.image_size)?;
        let dst = out.join(&entry.path).with_extension("png");
        if let Some(parent) = dst.parent() {
            std::fs::create_dir_all(parent).map_err(|e| advmakeup::Error::Io {
                path: parent.to_path_buf(),
                source: e,
            })?;
        }
        face.save_png(&dst)?;
        written += 1;
    }
    write_json(&out.join("skipped.json"), &skipped)?;
    if written > 0 {
        let prepared = scan_manifest(&out, cfg.domain)?;
        prepared.save_json(&out.join("manifest.json"))?;
    }
    println!("prepared {written} images, skipped {}", skipped.len());
    if written == 0 {
        return Err(advmakeup::Error::EmptyDataset(out).into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train-classifier

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainClassifierConfig {
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub image_size: usize,
    pub base_width: usize,
    pub blocks: usize,
    #[serde(flatten)]
    pub training: ClassifierTrainConfig,
}

impl Default for TrainClassifierConfig {
    fn default() -> Self {
        Self {
            train_dir: None,
            test_dir: None,
            image_size: advmakeup::dataset::DEFAULT_IMAGE_SIZE,
            base_width: 8,
            blocks: 3,
            training: ClassifierTrainConfig::default(),
        }
    }
}

pub fn train_classifier(g: &GlobalArgs, a: &TrainClassifierArgs) -> Result<()> {
    let mut cfg: TrainClassifierConfig = load_config(g)?;
    set_opt(&mut cfg.train_dir, &a.train_dir);
    set_opt(&mut cfg.test_dir, &a.test_dir);
    set_opt(&mut cfg.training.init_checkpoint, &a.init_checkpoint);
    set(&mut cfg.image_size, &a.image_size);
    set(&mut cfg.base_width, &a.base_width);
    set(&mut cfg.blocks, &a.blocks);
    set(&mut cfg.training.learning_rate, &a.learning_rate);
    set(&mut cfg.training.epochs, &a.epochs);
    set(&mut cfg.training.batch_size, &a.batch_size);
    set(&mut cfg.training.seed, &g.seed);

    let out = out_dir(g)?;
    let train = scan_manifest(&existing(&cfg.train_dir, "--train-dir")?, DomainTag::NonMakeup)?;
    let test = scan_manifest(&existing(&cfg.test_dir, "--test-dir")?, DomainTag::NonMakeup)?;
    cfg.training.validate()?;
    let spec = match &cfg.training.init_checkpoint {
        Some(path) => {
            if !path.exists() {
                return Err(invalid(format!("init checkpoint {} does not exist", path.display())));
            }
            load_kind(path, NetworkKind::Classifier)?.spec
        }
        None => NetworkSpec::classifier(cfg.image_size, cfg.base_width, cfg.blocks, train.num_classes),
    };
    spec.validate()?;
    if train.num_classes != test.num_classes || train.num_classes != spec.num_classes {
        return Err(advmakeup::Error::ClassCountMismatch(format!(
            "train has {}, test has {}, network has {} classes",
            train.num_classes, test.num_classes, spec.num_classes
        ))
        .into());
    }

    let digest = write_config_copy(&out, &cfg)?;
    println!("regime={}", cfg.training.regime());
    let (ckpt, history) = run_classifier(
        &cfg.training,
        &train,
        &test,
        &spec,
        &run_options(g, digest, Some(out.clone())),
    )?;
    history.write_jsonl(&out.join("history.jsonl"))?;
    let acc = history
        .records
        .last()
        .and_then(|r| r.classifier.as_ref())
        .map_or(0.0, |c| c.test_accuracy);
    println!(
        "classifier written to {} (epochs {}, test accuracy {acc:.4})",
        out.join("classifier.ckpt").display(),
        ckpt.meta.epoch
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-attack

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainAttackConfig {
    pub victim: Option<PathBuf>,
    pub x_dir: Option<PathBuf>,
    pub y_dir: Option<PathBuf>,
    pub attacker_label: Option<usize>,
    /// Working resolution of the generators; the victim's input size when
    /// absent.
    pub image_size: Option<usize>,
    pub generator_width: usize,
    pub residual_blocks: usize,
    pub discriminator_width: usize,
    pub discriminator_layers: usize,
    #[serde(flatten)]
    pub attack: AttackConfig,
}

impl Default for TrainAttackConfig {
    fn default() -> Self {
        Self {
            victim: None,
            x_dir: None,
            y_dir: None,
            attacker_label: None,
            image_size: None,
            generator_width: 8,
            residual_blocks: 2,
            discriminator_width: 8,
            discriminator_layers: 3,
            attack: AttackConfig::default(),
        }
    }
}

pub fn train_attack(g: &GlobalArgs, a: &TrainAttackArgs) -> Result<()> {
    let mut cfg: TrainAttackConfig = load_config(g)?;
    set_opt(&mut cfg.victim, &a.victim);
    set_opt(&mut cfg.x_dir, &a.x_dir);
    set_opt(&mut cfg.y_dir, &a.y_dir);
    set_opt(&mut cfg.attacker_label, &a.attacker_label);
    let at = &mut cfg.attack;
    if let Some(m) = a.mode {
        at.mode = mode_of(m);
    }
    set_opt(&mut at.target_label, &a.target_label);
    set(&mut at.epochs, &a.epochs);
    set(&mut at.batch_size, &a.batch_size);
    set(&mut at.lambda_cycle, &a.lambda_cycle);
    set(&mut at.alpha_identity, &a.alpha_identity);
    set(&mut at.kappa, &a.kappa);
    set(&mut at.optimizer.learning_rate, &a.learning_rate);
    set(&mut at.checkpoint_every, &a.checkpoint_every);
    set(&mut at.blur.kernel_size, &a.blur_kernel);
    set(&mut at.blur.sigma, &a.blur_sigma);
    set(&mut at.additive_delta_scale, &a.delta_scale);
    if let Some(r) = a.l1_reduction {
        at.l1_reduction = match r {
            ReductionArg::Sum => L1Reduction::Sum,
            ReductionArg::Mean => L1Reduction::Mean,
        };
    }
    set(&mut at.seed, &g.seed);
    println!(
        "lambda_cycle={} alpha_identity={} kappa={}",
        cfg.attack.lambda_cycle, cfg.attack.alpha_identity, cfg.attack.kappa
    );

    let out = out_dir(g)?;
    cfg.attack.validate()?;
    let victim = load_checkpoint(&existing(&cfg.victim, "--victim")?)?;
    let x_all = scan_manifest(&existing(&cfg.x_dir, "--x-dir")?, DomainTag::NonMakeup)?;
    let y_set = scan_manifest(&existing(&cfg.y_dir, "--y-dir")?, DomainTag::Makeup)?;
    check_victim(&victim, &x_all, &cfg.attack)?;
    let attacker = cfg
        .attacker_label
        .ok_or_else(|| invalid("--attacker-label is required"))?;
    if attacker >= x_all.num_classes {
        return Err(advmakeup::Error::LabelOutOfRange {
            label: attacker,
            num_classes: x_all.num_classes,
        }
        .into());
    }
    let x_set: DatasetManifest = x_all.filter_label(attacker);
    if x_set.is_empty() {
        return Err(advmakeup::Error::EmptyDataset(x_all.root.join(format!("<class {attacker}>"))).into());
    }
    let size = cfg.image_size.unwrap_or(victim.spec.input_size);
    let nets = AttackNetworks {
        generator: NetworkSpec::generator(size, cfg.generator_width, cfg.residual_blocks),
        discriminator: NetworkSpec::discriminator(size, cfg.discriminator_width, cfg.discriminator_layers),
    };
    nets.validate()?;

    let digest = write_config_copy(&out, &cfg)?;
    let ckpt_dir = out.join("checkpoints");
    let outcome = run_attack(
        &cfg.attack,
        &victim,
        &x_set,
        &y_set,
        &nets,
        &run_options(g, digest, Some(ckpt_dir)),
    )?;
    for r in &outcome.history.records {
        if let Some(at) = &r.attack {
            let l = &at.loss;
            println!(
                "epoch {}: gan={:.6} cycle={:.6} identity={:.6} cyclegan_total={:.6} adv={:.6} total={:.6} success={:.3}",
                r.epoch, l.gan, l.cycle, l.identity, l.cyclegan_total, l.adv, l.total, at.digital_success_rate
            );
        }
    }
    let with_attacker = |c: &Checkpoint| {
        let mut c = c.clone();
        c.meta = c.meta.with_note("attacker_label", attacker);
        c
    };
    save_checkpoint(&with_attacker(&outcome.generator), &out.join("generator.ckpt"))?;
    save_checkpoint(&with_attacker(&outcome.generator_r), &out.join("generator_r.ckpt"))?;
    save_checkpoint(&outcome.discriminator_x, &out.join("discriminator_x.ckpt"))?;
    save_checkpoint(&outcome.discriminator_y, &out.join("discriminator_y.ckpt"))?;
    outcome.history.write_jsonl(&out.join("history.jsonl"))?;
    let selection = select_adversarial_snapshot(&outcome.history, &outcome.checkpoints)?;
    save_checkpoint(
        &with_attacker(&outcome.checkpoints[selection.index]),
        &out.join("generator_selected.ckpt"),
    )?;
    write_json(&out.join("selection.json"), &selection)?;
    println!(
        "selected epoch {}{}",
        selection.epoch,
        selection
            .warning
            .as_deref()
            .map(|w| format!(" ({w})"))
            .unwrap_or_default()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// generate

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub generator: Option<PathBuf>,
    pub input_dir: Option<PathBuf>,
    pub apply_blur: bool,
    pub blur: BlurConfig,
}

pub fn generate(g: &GlobalArgs, a: &GenerateArgs) -> Result<()> {
    let mut cfg: GenerateConfig = load_config(g)?;
    set_opt(&mut cfg.generator, &a.generator);
    set_opt(&mut cfg.input_dir, &a.input_dir);
    cfg.apply_blur |= a.blur;
    set(&mut cfg.blur.kernel_size, &a.blur_kernel);
    set(&mut cfg.blur.sigma, &a.blur_sigma);

    let out = out_dir(g)?;
    cfg.blur.validate()?;
    let ckpt = load_kind(&existing(&cfg.generator, "--generator")?, NetworkKind::Generator)?;
    let generator = Generator::from_checkpoint(&ckpt)?;
    let inputs = image_files(&existing(&cfg.input_dir, "--input-dir")?)?;
    let size = ckpt.spec.input_size;
    let images = inputs
        .iter()
        .map(|p| load_image(p, size))
        .collect::<advmakeup::Result<Vec<_>>>()?;

    write_config_copy(&out, &cfg)?;
    let mut written = 0;
    for (paths, chunk) in inputs.chunks(16).zip(images.chunks(16)) {
        let x = to_batch_tensor(chunk, DType::F32, &Device::Cpu)?;
        let y = generator.forward(&x)?;
        let plain = from_batch_tensor(&y)?;
        let blurred = if cfg.apply_blur {
            from_batch_tensor(&gaussian_blur_t(&y, &cfg.blur)?)?
        } else {
            Vec::new()
        };
        for (i, path) in paths.iter().enumerate() {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            plain[i].save_png(&out.join(format!("{stem}.png")))?;
            written += 1;
            if let Some(b) = blurred.get(i) {
                b.save_png(&out.join(format!("{stem}_blur.png")))?;
                written += 1;
            }
        }
    }
    println!("wrote {written} images to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub classifier: Option<PathBuf>,
    pub generator: Option<PathBuf>,
    pub frames_dir: Option<PathBuf>,
    pub attacker_label: Option<usize>,
    pub mode: AttackMode,
    pub target_label: Option<usize>,
    pub thresholds: Thresholds,
    pub blur: BlurConfig,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            classifier: None,
            generator: None,
            frames_dir: None,
            attacker_label: None,
            mode: AttackMode::Untargeted,
            target_label: None,
            thresholds: Thresholds::default(),
            blur: BlurConfig::default(),
        }
    }
}

pub fn evaluate(g: &GlobalArgs, a: &EvaluateArgs) -> Result<()> {
    let mut cfg: EvaluateConfig = load_config(g)?;
    set_opt(&mut cfg.classifier, &a.classifier);
    set_opt(&mut cfg.generator, &a.generator);
    set_opt(&mut cfg.frames_dir, &a.frames_dir);
    set_opt(&mut cfg.attacker_label, &a.attacker_label);
    if let Some(m) = a.mode {
        cfg.mode = mode_of(m);
    }
    set_opt(&mut cfg.target_label, &a.target_label);
    set(&mut cfg.thresholds.tau, &a.tau);
    set(&mut cfg.thresholds.tau_prime, &a.tau_prime);
    set(&mut cfg.blur.kernel_size, &a.blur_kernel);
    set(&mut cfg.blur.sigma, &a.blur_sigma);

    let out = out_dir(g)?;
    cfg.blur.validate()?;
    let classifier_ckpt = load_kind(&existing(&cfg.classifier, "--classifier")?, NetworkKind::Classifier)?;
    let generator_ckpt = load_kind(&existing(&cfg.generator, "--generator")?, NetworkKind::Generator)?;
    let goal = AttackGoal {
        mode: cfg.mode,
        target_label: cfg.target_label,
        thresholds: cfg.thresholds,
    };
    let k = classifier_ckpt.spec.num_classes;
    goal.validate(k)?;
    let attacker = cfg
        .attacker_label
        .ok_or_else(|| invalid("--attacker-label is required"))?;
    if attacker >= k {
        return Err(advmakeup::Error::LabelOutOfRange {
            label: attacker,
            num_classes: k,
        }
        .into());
    }
    let frames_dir = existing(&cfg.frames_dir, "--frames-dir")?;
    let frames = FrameSet::load_dir(&frames_dir, attacker, generator_ckpt.spec.input_size)?;
    let classifier = Classifier::from_checkpoint(&classifier_ckpt)?.frozen();
    let generator = Generator::from_checkpoint(&generator_ckpt)?.frozen();

    let digest = write_config_copy(&out, &cfg)?;
    let report = attack_report(&classifier, &generator, &cfg.blur, &frames, &goal, &digest)?;
    let files = emit_report(&report, &out)?;
    let fmt = |v: &[f64]| v.iter().map(|p| format!("{p:.1}")).collect::<Vec<_>>().join(" ");
    println!("baseline  %: {}", fmt(&report.baseline_per_class_percent));
    println!("attacked  %: {}", fmt(&report.per_class_percent));
    println!("unblurred %: {}", fmt(&report.unblurred_per_class_percent));
    println!("success: {}", report.success);
    println!("report written to {}", files.json.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    #[serde(flatten)]
    pub corpus: SynthSpec,
    pub frames: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            corpus: SynthSpec::default(),
            frames: 0,
        }
    }
}

pub fn synth(g: &GlobalArgs, a: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = load_config(g)?;
    let c = &mut cfg.corpus;
    set(&mut c.num_classes, &a.num_classes);
    set(&mut c.train_per_class, &a.train_per_class);
    set(&mut c.test_per_class, &a.test_per_class);
    set(&mut c.makeup_count, &a.makeup_count);
    set(&mut c.image_size, &a.image_size);
    set(&mut c.seed, &g.seed);
    set(&mut cfg.frames, &a.frames);

    let out = out_dir(g)?;
    if cfg.corpus.num_classes == 0 || cfg.corpus.image_size < 8 {
        return Err(invalid("synth needs >= 1 class and image_size >= 8"));
    }
    write_config_copy(&out, &cfg)?;
    let layout = write_corpus(&out, &cfg.corpus)?;
    if cfg.frames > 0 {
        for k in 0..cfg.corpus.num_classes {
            write_frames(&out.join("frames"), &cfg.corpus, k, cfg.frames)?;
        }
    }
    println!(
        "corpus written: train {} test {} makeup {}",
        layout.train.display(),
        layout.test.display(),
        layout.makeup.display()
    );
    Ok(())
}

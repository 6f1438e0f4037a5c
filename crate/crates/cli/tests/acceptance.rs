//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so each line is printed as it is
//! decided. Pass criterion numbers to run a subset:
//! `cargo test -p advmakeup-cli --test acceptance -- 1 4 5`.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use advmakeup::dataset::{decode_image, scan_manifest, DatasetManifest, DomainTag};
use advmakeup::evaluation::{
    attack_report, classify_frames, frame_probability, AttackGoal, EvaluationReport, FrameSet,
};
use advmakeup::models::{
    build_classifier, build_generator, save_checkpoint, Checkpoint, Classifier, Generator, LogitModel,
    NetworkSpec, Precision,
};
use advmakeup::objectives::{
    adv_loss_t, adv_loss_targeted, adv_loss_untargeted, cycle_loss, discriminator_loss_t, gan_loss,
    gan_loss_t, gaussian_blur, gaussian_blur_t, generator_gan_loss_t, identity_loss, total_loss,
    AttackConfig, AttackMode, BlurConfig, LossComponents, LOG_FLOOR,
};
use advmakeup::synth::{write_corpus, write_frames, CorpusLayout, SynthSpec};
use advmakeup::training::{
    parameters_identical, select_adversarial_snapshot, train_attack, train_classifier, victim_view,
    AttackNetworks, ClassifierTrainConfig, RunOptions,
};
use advmakeup::ImageTensor;
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn cpu() -> Device {
    Device::Cpu
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// 1. loss oracles

fn oracle_margin(z: &[f64], label: usize, kappa: f64, targeted: bool) -> f64 {
    let mut others: Vec<f64> = z.iter().enumerate().filter(|&(i, _)| i != label).map(|(_, &v)| v).collect();
    others.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let m = if targeted { others[0] - z[label] } else { z[label] - others[0] };
    if m > -kappa {
        m
    } else {
        -kappa
    }
}

fn oracle_gan(dx: &[f64], dy: &[f64], dyf: &[f64], dxf: &[f64]) -> f64 {
    let clamp = |s: f64| s.max(LOG_FLOOR).min(1.0 - LOG_FLOOR);
    let avg = |s: &[f64], complement: bool| {
        let mut acc = 0.0;
        for &v in s {
            acc += if complement { (1.0 - clamp(v)).ln() } else { clamp(v).ln() };
        }
        acc / s.len() as f64
    };
    avg(dy, false) + avg(dyf, true) + avg(dx, false) + avg(dxf, true)
}

/// Mean over the batch of the per-sample absolute-difference sum.
fn oracle_l1(a: &[f64], b: &[f64], n: usize) -> f64 {
    let per = a.len() / n;
    let mut total = 0.0;
    for s in 0..n {
        let mut acc = 0.0;
        for i in s * per..(s + 1) * per {
            acc += (a[i] - b[i]).abs();
        }
        total += acc;
    }
    total / n as f64
}

fn random_vec(r: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| r.random_range(lo..hi)).collect()
}

fn t4(v: &[f64], n: usize, h: usize) -> Tensor {
    Tensor::from_vec(v.to_vec(), (n, 3, h, h), &cpu()).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn criterion_1() -> Outcome {
    const TRIALS: usize = 200;
    let mut r = rng(101);
    let mut worst = 0.0f64;
    let mut note = |name: &str, got: f64, want: f64| -> Result<(), String> {
        let e = if got == want { 0.0 } else { rel_err(got, want) };
        worst = worst.max(e);
        if e > 1e-9 {
            return Err(format!("{name}: got {got} want {want} (rel {e:e})"));
        }
        Ok(())
    };
    for _ in 0..TRIALS {
        let k = r.random_range(2..12);
        let n = r.random_range(1..5);
        let kappa = r.random_range(0.0..10.0);
        let z = random_vec(&mut r, n * k, -30.0, 30.0);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let zt = Tensor::from_vec(z.clone(), (n, k), &cpu()).unwrap();
        for (mode, targeted) in [(AttackMode::Untargeted, false), (AttackMode::Targeted, true)] {
            let batch: Vec<f64> = adv_loss_t(&zt, &labels, kappa, mode).unwrap().to_vec1().unwrap();
            for row in 0..n {
                let zr = &z[row * k..(row + 1) * k];
                let want = oracle_margin(zr, labels[row], kappa, targeted);
                let slice = if targeted {
                    adv_loss_targeted(zr, labels[row], kappa).unwrap()
                } else {
                    adv_loss_untargeted(zr, labels[row], kappa).unwrap()
                };
                note("adv_loss", slice, want)?;
                note("adv_loss (batched)", batch[row], want)?;
            }
        }

        let m = r.random_range(1..6);
        let mut scores = || random_vec(&mut r, m, 0.0, 1.0);
        let (a, b, c, d) = (scores(), scores(), scores(), scores());
        let want = oracle_gan(&a, &b, &c, &d);
        note("gan_loss", gan_loss(&a, &b, &c, &d).unwrap(), want)?;
        let tv = |v: &[f64]| Tensor::from_vec(v.to_vec(), v.len(), &cpu()).unwrap();
        note("gan_loss (tensor)", scalar(&gan_loss_t(&tv(&a), &tv(&b), &tv(&c), &tv(&d)).unwrap()), want)?;

        let (bn, side) = (r.random_range(1..4), r.random_range(1..5));
        let len = bn * 3 * side * side;
        let (x, xr, y, yr) = (
            random_vec(&mut r, len, 0.0, 1.0),
            random_vec(&mut r, len, 0.0, 1.0),
            random_vec(&mut r, len, 0.0, 1.0),
            random_vec(&mut r, len, 0.0, 1.0),
        );
        let (xt, xrt, yt, yrt) = (t4(&x, bn, side), t4(&xr, bn, side), t4(&y, bn, side), t4(&yr, bn, side));
        let want = oracle_l1(&xr, &x, bn) + oracle_l1(&yr, &y, bn);
        note("cycle_loss", scalar(&cycle_loss(&xt, &xrt, &yt, &yrt).unwrap()), want)?;
        note("identity_loss", scalar(&identity_loss(&xt, &xrt, &yt, &yrt).unwrap()), want)?;

        let cfg = AttackConfig {
            lambda_cycle: r.random_range(0.1..200.0),
            alpha_identity: r.random_range(0.0..100.0),
            kappa,
            ..AttackConfig::default()
        };
        let comp = LossComponents {
            gan: r.random_range(-10.0..0.0),
            cycle: r.random_range(0.0..20.0),
            identity: r.random_range(0.0..20.0),
            adv: r.random_range(-kappa..20.0),
        };
        let b = total_loss(comp, &cfg).unwrap();
        let hand = comp.gan + cfg.lambda_cycle * comp.cycle + cfg.alpha_identity * comp.identity;
        note("cyclegan_total", b.cyclegan_total, hand)?;
        note("total_loss", b.total, hand + comp.adv)?;
    }
    Ok(format!("{TRIALS} random cases per term, worst relative error {worst:e}"))
}

// ---------------------------------------------------------------------------
// 2. gradients

struct GradReport {
    checked: usize,
    zero: usize,
    worst: f64,
    failures: Vec<String>,
}

impl GradReport {
    fn new() -> Self {
        Self {
            checked: 0,
            zero: 0,
            worst: 0.0,
            failures: Vec::new(),
        }
    }

    /// Compares reverse-mode gradients of the scalar `f` with central
    /// differences on `picks` random coordinates of each variable.
    fn run<F: Fn() -> Tensor>(&mut self, what: &str, vars: &[(&str, &Var)], f: F, picks: usize, r: &mut ChaCha8Rng) {
        let f0 = f();
        let grads = f0.backward().unwrap();
        let h = 1e-6;
        // central differences cannot resolve slopes below the round-off
        // of f itself
        let noise = (16.0 * f64::EPSILON * scalar(&f0).abs() / h).max(1e-8);
        for (name, var) in vars {
            let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let g: Vec<f64> = match grads.get(var.as_tensor()) {
                Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
                None => vec![0.0; base.len()],
            };
            for _ in 0..picks.min(base.len()) {
                let i = r.random_range(0..base.len());
                let mut v = base.clone();
                v[i] = base[i] + h;
                var.set(&Tensor::from_vec(v.clone(), var.dims(), &cpu()).unwrap()).unwrap();
                let up = scalar(&f());
                v[i] = base[i] - h;
                var.set(&Tensor::from_vec(v, var.dims(), &cpu()).unwrap()).unwrap();
                let down = scalar(&f());
                var.set(&Tensor::from_vec(base.clone(), var.dims(), &cpu()).unwrap()).unwrap();
                let numeric = (up - down) / (2.0 * h);
                self.checked += 1;
                // both sides at round-off level: a structurally zero entry
                // (e.g. a bias that an instance norm cancels)
                if g[i].abs().max(numeric.abs()) < noise {
                    self.zero += 1;
                    continue;
                }
                let e = rel_err(g[i], numeric);
                self.worst = self.worst.max(e);
                if e >= 1e-3 {
                    self.failures.push(format!("{what}/{name}[{i}]: analytic {} numeric {numeric}", g[i]));
                }
            }
        }
    }
}

fn var_from(v: Vec<f64>, shape: &[usize]) -> Var {
    Var::from_tensor(&Tensor::from_vec(v, shape, &cpu()).unwrap()).unwrap()
}

/// Values in `[0, 1]` whose pairwise differences with `other` stay clear of
/// the kink of `|.|`.
fn away_from(r: &mut ChaCha8Rng, other: &[f64]) -> Vec<f64> {
    other
        .iter()
        .map(|&o| {
            let d = r.random_range(0.01..0.3) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
            if (0.0..=1.0).contains(&(o + d)) {
                o + d
            } else {
                o - d
            }
        })
        .collect()
}

/// Logit rows whose maxima are separated by at least `gap` and whose
/// margins stay `gap` away from the `-kappa` floor.
fn untied_logits(r: &mut ChaCha8Rng, n: usize, k: usize, labels: &[usize], kappa: f64, gap: f64) -> Vec<f64> {
    loop {
        let z = random_vec(r, n * k, -4.0, 4.0);
        let ok = (0..n).all(|row| {
            let zr = &z[row * k..(row + 1) * k];
            let mut s = zr.to_vec();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let m = oracle_margin(zr, labels[row], f64::INFINITY, false);
            let top_gap = s.windows(2).all(|w| w[0] - w[1] > gap);
            top_gap && (m + kappa).abs() > gap && (-m + kappa).abs() > gap
        });
        if ok {
            return z;
        }
    }
}

fn criterion_2() -> Outcome {
    let mut r = rng(202);
    let mut rep = GradReport::new();
    let (n, side) = (2usize, 8usize);
    let len = n * 3 * side * side;

    // GAN terms with respect to every score vector
    let sv = |r: &mut ChaCha8Rng| var_from(random_vec(r, 4, 0.05, 0.95), &[4]);
    let (a, b, c, d) = (sv(&mut r), sv(&mut r), sv(&mut r), sv(&mut r));
    let vars = [("d_x_real", &a), ("d_y_real", &b), ("d_y_fake", &c), ("d_x_fake", &d)];
    rep.run("gan_loss", &vars, || gan_loss_t(&a, &b, &c, &d).unwrap(), 4, &mut r);
    rep.run("discriminator_loss", &vars, || discriminator_loss_t(&a, &b, &c, &d).unwrap(), 4, &mut r);
    rep.run("generator_gan_loss", &vars[2..], || generator_gan_loss_t(&c, &d).unwrap(), 4, &mut r);

    // L1 terms at 8x8
    let x = random_vec(&mut r, len, 0.0, 1.0);
    let y = random_vec(&mut r, len, 0.0, 1.0);
    let xt = t4(&x, n, side);
    let yt = t4(&y, n, side);
    let xr = var_from(away_from(&mut r, &x), &[n, 3, side, side]);
    let yr = var_from(away_from(&mut r, &y), &[n, 3, side, side]);
    let vars = [("x_rec", &xr), ("y_rec", &yr)];
    rep.run("cycle_loss", &vars, || cycle_loss(&xt, &xr, &yt, &yr).unwrap(), 12, &mut r);
    rep.run("identity_loss", &vars, || identity_loss(&xt, &xr, &yt, &yr).unwrap(), 12, &mut r);

    // margin terms
    let (bn, k, kappa) = (4usize, 5usize, 5.0);
    let labels: Vec<usize> = (0..bn).map(|_| r.random_range(0..k)).collect();
    let z = var_from(untied_logits(&mut r, bn, k, &labels, kappa, 1e-3), &[bn, k]);
    for mode in [AttackMode::Untargeted, AttackMode::Targeted] {
        rep.run(
            &format!("adv_loss {mode:?}"),
            &[("logits", &z)],
            || adv_loss_t(&z, &labels, kappa, mode).unwrap().mean_all().unwrap(),
            bn * k,
            &mut r,
        );
    }

    // blur, Φ∘G and the full weighted objective through tiny f64 networks
    let f64_spec = |s: NetworkSpec| s.with_precision(Precision::F64);
    let g = build_generator(&f64_spec(NetworkSpec::generator(side, 4, 1)), 7).unwrap();
    let g_r = build_generator(&f64_spec(NetworkSpec::generator(side, 4, 1)), 8).unwrap();
    let victim = build_classifier(&f64_spec(NetworkSpec::classifier(side, 4, 2, 3)), 9, None).unwrap();
    let blur = BlurConfig::default();
    let xin = var_from(x.clone(), &[n, 3, side, side]);
    let probe = t4(&random_vec(&mut r, len, -0.5, 0.5), n, side);

    rep.run(
        "blur",
        &[("input", &xin)],
        || (gaussian_blur_t(&xin, &blur).unwrap() * &probe).unwrap().sum_all().unwrap(),
        12,
        &mut r,
    );
    let phi_g = || (gaussian_blur_t(&g.forward(&xin).unwrap(), &blur).unwrap() * &probe).unwrap().sum_all().unwrap();
    let mut g_vars: Vec<(&str, &Var)> = g.params().iter().collect();
    g_vars.push(("input", &xin));
    rep.run("blur∘G", &g_vars, phi_g, 3, &mut r);

    let cfg = AttackConfig::default();
    let labels = vec![0usize; n];
    let objective = || {
        let fake = g.forward(&xin).unwrap();
        let logits = victim.forward(&victim_view(&fake, &blur, side).unwrap()).unwrap();
        let adv = adv_loss_t(&logits, &labels, cfg.kappa, AttackMode::Untargeted).unwrap().mean_all().unwrap();
        let rec = g_r.forward(&fake).unwrap();
        let cyc = cycle_loss(&xt, &rec, &yt, &g.forward(&g_r.forward(&yt).unwrap()).unwrap()).unwrap();
        let idt = identity_loss(&xt, &g_r.forward(&xt).unwrap(), &yt, &g.forward(&yt).unwrap()).unwrap();
        let weighted = ((cyc * cfg.lambda_cycle).unwrap() + (idt * cfg.alpha_identity).unwrap()).unwrap();
        (weighted + adv).unwrap()
    };
    rep.run("weighted objective through victim∘blur∘G", &g_vars, objective, 2, &mut r);

    if rep.failures.is_empty() {
        Ok(format!(
            "{} coordinates ({} structurally zero), worst relative error {:e}",
            rep.checked, rep.zero, rep.worst
        ))
    } else {
        Err(format!("{} of {} coordinates off: {}", rep.failures.len(), rep.checked, rep.failures.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// 3. margin properties

fn criterion_3() -> Outcome {
    let mut r = rng(303);
    const N: usize = 10_000;
    let (mut below, mut shift_breaks, mut zero_breaks) = (0, 0, 0);
    for _ in 0..N {
        let k = r.random_range(2..12);
        let l = r.random_range(0..k);
        let kappa = r.random_range(0.0..10.0);
        let z = random_vec(&mut r, k, -100.0, 100.0);
        if adv_loss_untargeted(&z, l, kappa).unwrap() < -kappa {
            below += 1;
        }

        // dyadic grid: every shifted value is representable, so equality is exact
        let grid: Vec<f64> = (0..k).map(|_| r.random_range(-4096i32..4096) as f64 / 64.0).collect();
        let c = r.random_range(-1000i32..1000) as f64 / 8.0;
        let shifted: Vec<f64> = grid.iter().map(|v| v + c).collect();
        if adv_loss_untargeted(&grid, l, kappa).unwrap() != adv_loss_untargeted(&shifted, l, kappa).unwrap() {
            shift_breaks += 1;
        }

        // small integers so ties at the top are common
        let ints: Vec<f64> = (0..k).map(|_| r.random_range(-3i32..4) as f64).collect();
        let leads = ints.iter().enumerate().all(|(i, &v)| i == l || v < ints[l]);
        let v = adv_loss_untargeted(&ints, l, 0.0).unwrap();
        if (v == 0.0) == leads {
            zero_breaks += 1;
        }
    }
    check(
        below == 0 && shift_breaks == 0 && zero_breaks == 0,
        format!("{N} vectors: {below} below -kappa, {shift_breaks} shift mismatches, {zero_breaks} zero-iff violations"),
    )
}

// ---------------------------------------------------------------------------
// 4. frame metric

fn criterion_4() -> Outcome {
    let mut r = rng(404);
    let spec = NetworkSpec::classifier(16, 4, 2, 5);
    let mut sets = 0;
    for seed in 0..40u64 {
        let net = build_classifier(&spec, seed, None).unwrap();
        let count = r.random_range(1..90);
        let frames: Vec<ImageTensor> = (0..count)
            .map(|_| {
                let d: Vec<f32> = (0..16 * 16 * 3).map(|_| r.random::<f32>()).collect();
                ImageTensor::new(16, 16, d).unwrap()
            })
            .collect();
        let set = FrameSet::new(frames.clone(), "random", 0).unwrap();
        let counts = classify_frames(&net, &set).unwrap();

        let mut recount = vec![0usize; 5];
        for f in &frames {
            let z: Vec<f32> = net
                .logits(&f.to_tensor(DType::F32, &cpu()).unwrap())
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            let mut best = 0;
            for i in 1..z.len() {
                if z[i] > z[best] {
                    best = i;
                }
            }
            recount[best] += 1;
        }
        if counts != recount {
            return Err(format!("seed {seed}: classify_frames {counts:?} vs recount {recount:?}"));
        }
        let p = frame_probability(&counts).unwrap();
        let sum: f64 = p.iter().sum();
        if (sum - 100.0).abs() > 1e-9 {
            return Err(format!("seed {seed}: shares sum to {sum}"));
        }
        sets += 1;
    }
    Ok(format!("{sets} frame sets: counts match a per-frame recount, shares sum to 100"))
}

// ---------------------------------------------------------------------------
// 5. blur

fn criterion_5() -> Outcome {
    let mut r = rng(505);
    let mut worst_sum = 0.0f64;
    let mut worst_fixed = 0.0f64;
    for _ in 0..200 {
        let k = 2 * r.random_range(0..10) + 1;
        let cfg = BlurConfig::new(k, r.random_range(0.05..20.0)).unwrap();
        worst_sum = worst_sum.max((cfg.kernel_2d().iter().sum::<f64>() - 1.0).abs());
        worst_sum = worst_sum.max((cfg.kernel_1d().iter().sum::<f64>() - 1.0).abs());

        let side = r.random_range(k / 2 + 1..24).max(k / 2 + 1);
        let c = r.random::<f64>();
        let flat = Tensor::full(c, (1, 3, side, side), &cpu()).unwrap();
        let out: Vec<f64> = gaussian_blur_t(&flat, &cfg).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        worst_fixed = worst_fixed.max(out.iter().map(|v| (v - c).abs()).fold(0.0, f64::max));

        let d: Vec<f32> = (0..side * side * 3).map(|_| r.random::<f32>()).collect();
        let img = ImageTensor::new(side, side, d).unwrap();
        let unit = BlurConfig::new(1, r.random_range(0.05..5.0)).unwrap();
        if gaussian_blur(&img, &unit).unwrap() != img {
            return Err("kernel_size 1 changed an image".into());
        }
    }
    check(
        worst_sum <= 1e-12 && worst_fixed <= 1e-12,
        format!("200 configs: worst |sum-1| {worst_sum:e}, worst constant drift {worst_fixed:e}, size 1 exact identity"),
    )
}

// ---------------------------------------------------------------------------
// 6-9. desk-scale runs

struct Desk {
    _dir: tempfile::TempDir,
    root: PathBuf,
    spec: SynthSpec,
    train: DatasetManifest,
    makeup: DatasetManifest,
    victim: Checkpoint,
    test_accuracy: f64,
    train_time: Duration,
}

const ATTACKER: usize = 0;
const TARGET: usize = 3;

fn desk() -> &'static Desk {
    static CELL: OnceLock<Desk> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let spec = SynthSpec::default();
        let CorpusLayout { train, test, makeup } = write_corpus(&root, &spec).unwrap();
        let train = scan_manifest(&train, DomainTag::NonMakeup).unwrap();
        let test = scan_manifest(&test, DomainTag::NonMakeup).unwrap();
        let cfg = ClassifierTrainConfig {
            learning_rate: 1e-3,
            epochs: 6,
            batch_size: 16,
            init_checkpoint: None,
            seed: 0,
        };
        let net = NetworkSpec::classifier(spec.image_size, 8, 3, spec.num_classes);
        let start = Instant::now();
        let (victim, history) = train_classifier(&cfg, &train, &test, &net, &RunOptions::default()).unwrap();
        let test_accuracy = history.records.last().unwrap().classifier.as_ref().unwrap().test_accuracy;
        Desk {
            train_time: start.elapsed(),
            _dir: dir,
            root,
            spec,
            train,
            makeup: scan_manifest(&makeup, DomainTag::Makeup).unwrap(),
            victim,
            test_accuracy,
        }
    })
}

fn criterion_6() -> Outcome {
    let d = desk();
    check(
        d.test_accuracy >= 0.90 && d.train_time <= Duration::from_secs(30 * 60),
        format!(
            "{} classes, {}/{} images per class at {} px: test accuracy {:.3} after {:.0?}",
            d.spec.num_classes, d.spec.train_per_class, d.spec.test_per_class, d.spec.image_size, d.test_accuracy, d.train_time
        ),
    )
}

struct SeedResult {
    baseline: f64,
    attacked: f64,
    elapsed: Duration,
}

fn desk_attack(seed: u64, goal: &AttackGoal) -> SeedResult {
    let d = desk();
    let start = Instant::now();
    let cfg = AttackConfig {
        mode: goal.mode,
        target_label: goal.target_label,
        epochs: 5,
        checkpoint_every: 1,
        seed,
        ..AttackConfig::default()
    };
    let x = d.train.filter_label(ATTACKER);
    let out = train_attack(&cfg, &d.victim, &x, &d.makeup, &AttackNetworks::desk(d.spec.image_size), &RunOptions::default())
        .unwrap();
    let pick = select_adversarial_snapshot(&out.history, &out.checkpoints).unwrap();
    let generator = Generator::from_checkpoint(&out.checkpoints[pick.index]).unwrap();
    let victim = Classifier::from_checkpoint(&d.victim).unwrap();
    let frames_dir = write_frames(&d.root.join("frames"), &d.spec, ATTACKER, 30).unwrap();
    let frames = FrameSet::load_dir(&frames_dir, ATTACKER, d.spec.image_size).unwrap();
    let report = attack_report(&victim, &generator, &cfg.blur, &frames, goal, "").unwrap();
    let watch = goal.target_label.unwrap_or(ATTACKER);
    SeedResult {
        baseline: report.baseline_per_class_percent[ATTACKER],
        attacked: report.per_class_percent[watch],
        elapsed: start.elapsed(),
    }
}

fn criterion_7() -> Outcome {
    let mut passes = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let s = desk_attack(seed, &AttackGoal::untargeted());
        let ok = s.baseline >= 90.0 && s.attacked <= 30.0 && s.elapsed <= Duration::from_secs(3600);
        passes += ok as usize;
        lines.push(format!(
            "seed {seed}: P_attacker {:.1}% -> {:.1}% in {:.0?}",
            s.baseline, s.attacked, s.elapsed
        ));
    }
    check(passes >= 2, format!("{passes}/3 seeds ({})", lines.join(", ")))
}

fn criterion_8() -> Outcome {
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let s = desk_attack(seed, &AttackGoal::targeted(TARGET));
        lines.push(format!("seed {seed}: P_{TARGET} {:.1}% in {:.0?}", s.attacked, s.elapsed));
        if s.attacked >= 50.0 {
            return Ok(format!("target reached ({})", lines.join(", ")));
        }
    }
    Err(format!("no seed reached 50% ({})", lines.join(", ")))
}

fn criterion_9() -> Outcome {
    let d = desk();
    let dir = tempfile::tempdir().unwrap();
    let victim_file = dir.path().join("victim.ckpt");
    save_checkpoint(&d.victim, &victim_file).unwrap();
    let bytes_before = std::fs::read(&victim_file).unwrap();
    let params_before = d.victim.params.snapshot().unwrap();

    let x = d.train.filter_label(ATTACKER);
    let x = DatasetManifest {
        entries: x.entries[..10].to_vec(),
        ..x
    };
    let cfg = AttackConfig {
        epochs: 2,
        seed: 4,
        ..AttackConfig::default()
    };
    let nets = AttackNetworks::desk(d.spec.image_size);
    let mut files = Vec::new();
    for run in 0..2 {
        let opts = RunOptions {
            deterministic: true,
            config_digest: "acceptance".into(),
            checkpoint_dir: None,
        };
        let out = train_attack(&cfg, &d.victim, &x, &d.makeup, &nets, &opts).unwrap();
        let path = dir.path().join(format!("history_{run}.jsonl"));
        out.history.write_jsonl(&path).unwrap();
        files.push(std::fs::read(&path).unwrap());
    }
    let frozen = parameters_identical(&params_before, &d.victim.params).unwrap()
        && params_before.fingerprint().unwrap() == d.victim.params.fingerprint().unwrap();
    save_checkpoint(&d.victim, &victim_file).unwrap();
    let same_file = std::fs::read(&victim_file).unwrap() == bytes_before;
    let same_history = files[0] == files[1] && !files[0].is_empty();
    check(
        frozen && same_file && same_history,
        format!("victim parameters bit-identical: {frozen}; victim file identical: {same_file}; history files identical: {same_history}"),
    )
}

// ---------------------------------------------------------------------------
// 10. CLI

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_advmakeup"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`advmakeup {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let raw = d.join("raw");
    run_cli(&[
        "--out", p(&raw), "--seed", "11", "synth", "--num-classes", "2", "--train-per-class", "5",
        "--test-per-class", "2", "--makeup-count", "6", "--image-size", "72", "--frames", "8",
    ])?;
    for (sub, domain) in [("train", "non-makeup"), ("test", "non-makeup"), ("makeup", "makeup"), ("frames", "frame")] {
        run_cli(&[
            "--out", p(&d.join("prep").join(sub)), "prepare", "--raw-dir", p(&raw.join(sub)),
            "--image-size", "32", "--domain", domain,
        ])?;
    }
    let prep = d.join("prep");
    run_cli(&[
        "--out", p(&d.join("clf")), "--seed", "0", "--deterministic", "train-classifier",
        "--train-dir", p(&prep.join("train")), "--test-dir", p(&prep.join("test")), "--image-size", "32",
        "--epochs", "6", "--learning-rate", "1e-3", "--batch-size", "5",
    ])?;
    let victim = d.join("clf").join("classifier.ckpt");
    run_cli(&[
        "--out", p(&d.join("atk")), "--seed", "0", "--deterministic", "train-attack", "--victim", p(&victim),
        "--x-dir", p(&prep.join("train")), "--y-dir", p(&prep.join("makeup")), "--attacker-label", "0",
        "--epochs", "3", "--checkpoint-every", "1",
    ])?;
    let generator = d.join("atk").join("generator_selected.ckpt");
    let frames = prep.join("frames").join("class_00");
    run_cli(&[
        "--out", p(&d.join("gen")), "generate", "--generator", p(&generator), "--input-dir", p(&frames), "--blur",
    ])?;
    run_cli(&[
        "--out", p(&d.join("eval")), "evaluate", "--classifier", p(&victim), "--generator", p(&generator),
        "--frames-dir", p(&frames), "--attacker-label", "0",
    ])?;
    let elapsed = start.elapsed();

    let eval = d.join("eval");
    let text = std::fs::read_to_string(eval.join("report.json")).map_err(|e| e.to_string())?;
    let json: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    for key in ["mode", "attacker_label", "per_class_percent", "success", "thresholds", "baseline_per_class_percent", "config_digest"] {
        if json.get(key).is_none() {
            return Err(format!("report.json lacks `{key}`"));
        }
    }
    if json["thresholds"].get("tau").is_none() || json["thresholds"].get("tau_prime").is_none() {
        return Err("report.json thresholds lack tau/tau_prime".into());
    }
    let report: EvaluationReport = serde_json::from_value(json).map_err(|e| e.to_string())?;
    let sum: f64 = report.per_class_percent.iter().sum();

    let csv = std::fs::read_to_string(eval.join("perclass.csv")).map_err(|e| e.to_string())?;
    let mut lines = csv.lines();
    let header_ok = lines.next() == Some("class,percent");
    let rows: Vec<(usize, f64)> = lines
        .map(|l| {
            let (c, v) = l.split_once(',').unwrap();
            (c.parse().unwrap(), v.parse().unwrap())
        })
        .collect();
    let csv_sum: f64 = rows.iter().map(|r| r.1).sum();
    let csv_ok = header_ok && rows.len() == 2 && rows.iter().enumerate().all(|(i, r)| r.0 == i);

    let chart = decode_image(&eval.join("chart.png")).map_err(|e| e.to_string())?;
    let generated = std::fs::read_dir(d.join("gen")).map_err(|e| e.to_string())?.count();

    check(
        elapsed <= Duration::from_secs(300)
            && (sum - 100.0).abs() < 1e-9
            && (csv_sum - 100.0).abs() < 1e-6
            && csv_ok
            && chart.width() > 0
            && generated >= 16,
        format!(
            "pipeline in {elapsed:.0?}; report shares sum {sum:.6}, csv rows {} summing {csv_sum:.6}, chart {}x{}, {generated} generated files",
            rows.len(),
            chart.width(),
            chart.height()
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(u32, &str, Duration, fn() -> Outcome); 10] = [
        (1, "loss-formula oracles", Duration::from_secs(10), criterion_1),
        (2, "gradient checks", Duration::from_secs(120), criterion_2),
        (3, "margin properties", Duration::from_secs(5), criterion_3),
        (4, "frame metric", Duration::from_secs(60), criterion_4),
        (5, "blur properties", Duration::from_secs(60), criterion_5),
        (6, "desk-scale classifier", Duration::from_secs(30 * 60), criterion_6),
        (7, "desk-scale untargeted attack", Duration::from_secs(3 * 3600), criterion_7),
        (8, "desk-scale targeted attack", Duration::from_secs(3 * 3600), criterion_8),
        (9, "frozen victim and determinism", Duration::from_secs(3600), criterion_9),
        (10, "end-to-end CLI", Duration::from_secs(300), criterion_10),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, budget, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; over the {budget:.0?} budget")),
            other => other,
        };
        match &result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{elapsed:.1?}]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{elapsed:.1?}]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

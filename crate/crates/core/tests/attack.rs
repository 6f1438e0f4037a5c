//! Attack-training invariants: desk-sized networks on a 32 px corpus.

use std::path::Path;
use std::sync::OnceLock;

use advmakeup::dataset::{scan_manifest, DatasetManifest, DomainTag};
use advmakeup::models::{Checkpoint, NetworkSpec};
use advmakeup::objectives::AttackConfig;
use advmakeup::synth::{write_corpus, CorpusLayout, SynthSpec};
use advmakeup::training::{
    parameters_identical, train_attack, train_classifier, AttackNetworks, ClassifierTrainConfig,
    RunOptions,
};

struct Fixture {
    _dir: tempfile::TempDir,
    victim: Checkpoint,
    attacker: DatasetManifest,
    makeup: DatasetManifest,
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            num_classes: 3,
            train_per_class: 10,
            test_per_class: 4,
            makeup_count: 10,
            image_size: 32,
            seed: 5,
        };
        let CorpusLayout { train, test, makeup } = write_corpus(dir.path(), &spec).unwrap();
        let train = scan_manifest(&train, DomainTag::NonMakeup).unwrap();
        let test = scan_manifest(&test, DomainTag::NonMakeup).unwrap();
        let cfg = ClassifierTrainConfig {
            learning_rate: 1e-3,
            epochs: 8,
            batch_size: 10,
            init_checkpoint: None,
            seed: 0,
        };
        let net = NetworkSpec::classifier(32, 8, 3, 3);
        let (victim, _) = train_classifier(&cfg, &train, &test, &net, &opts(None)).unwrap();
        Fixture {
            victim,
            attacker: train.filter_label(0),
            makeup: scan_manifest(&makeup, DomainTag::Makeup).unwrap(),
            _dir: dir,
        }
    })
}

fn opts(dir: Option<&Path>) -> RunOptions {
    RunOptions {
        deterministic: true,
        config_digest: "test".into(),
        checkpoint_dir: dir.map(Path::to_path_buf),
    }
}

fn attack_cfg(seed: u64, epochs: usize) -> AttackConfig {
    AttackConfig {
        epochs,
        batch_size: 5,
        seed,
        checkpoint_every: 5,
        ..AttackConfig::default()
    }
}

fn nets() -> AttackNetworks {
    AttackNetworks::desk(32)
}

#[test]
fn victim_is_untouched_and_histories_repeat() {
    let f = fixture();
    let before = f.victim.params.snapshot().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = attack_cfg(1, 2);
    let a = train_attack(&cfg, &f.victim, &f.attacker, &f.makeup, &nets(), &opts(Some(dir.path()))).unwrap();
    assert!(parameters_identical(&before, &f.victim.params).unwrap());
    assert_eq!(before.fingerprint().unwrap(), f.victim.params.fingerprint().unwrap());

    let b = train_attack(&cfg, &f.victim, &f.attacker, &f.makeup, &nets(), &opts(None)).unwrap();
    assert_eq!(a.history.to_jsonl().unwrap(), b.history.to_jsonl().unwrap());
    assert!(parameters_identical(&a.generator.params, &b.generator.params).unwrap());

    let other = train_attack(&attack_cfg(2, 2), &f.victim, &f.attacker, &f.makeup, &nets(), &opts(None)).unwrap();
    assert_ne!(a.history.to_jsonl().unwrap(), other.history.to_jsonl().unwrap());

    assert!(dir.path().join("generator_epoch_0002.ckpt").exists());
    assert_eq!(a.checkpoints.len(), 1);
}

#[test]
fn every_record_balances_and_adv_falls() {
    let f = fixture();
    for seed in [0u64, 1, 2] {
        let cfg = attack_cfg(seed, 20);
        let out = train_attack(&cfg, &f.victim, &f.attacker, &f.makeup, &nets(), &opts(None)).unwrap();
        let w = cfg.weights();
        let adv: Vec<f64> = out
            .history
            .records
            .iter()
            .map(|r| {
                let at = r.attack.as_ref().unwrap();
                assert!(at.loss.check_invariants(1e-9), "seed {seed} epoch {}: {:?}", r.epoch, at.loss);
                let l = &at.loss;
                let expect = l.gan + w.lambda_cycle * l.cycle + w.alpha_identity * l.identity;
                assert!((l.cyclegan_total - expect).abs() <= 1e-9 * expect.abs().max(1.0));
                l.adv
            })
            .collect();
        assert_eq!(adv.len(), 20);
        let first = adv[..10].iter().sum::<f64>() / 10.0;
        let last = adv[10..].iter().sum::<f64>() / 10.0;
        assert!(last < first, "seed {seed}: first {first} last {last}");
        assert_eq!(out.checkpoints.len(), 4);
    }
}

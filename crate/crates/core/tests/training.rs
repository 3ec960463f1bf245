use std::fs;
use std::path::Path;

use aqgt_core::checkpoint::Checkpoint;
use aqgt_core::data::{filter_sot, Split};
use aqgt_core::model::Batch;
use aqgt_core::pipeline::{load_run_corpus, load_trainer, load_vqs, run};
use aqgt_core::train::{prepare_features, validation_loss};
use aqgt_core::{Command, GestureClip, RunConfig};

fn tiny(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 11,
        run_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.corpus.clips = 8;
    let m = &mut cfg.model;
    m.vq_gesture.codebook_size = 16;
    m.vq_gesture.hidden = 16;
    m.vq_gesture.latent_dim = 4;
    m.vq_audio.codebook_size = 16;
    m.vq_audio.hidden = 8;
    m.adversarial.critic_hidden = vec![16];
    m.seq.ffn_hidden = 16;
    m.seq.gru2_layers = 1;
    m.aligner.fc_dim = 8;
    m.aligner.hidden = 16;
    cfg.vq_gesture_train.epochs = 2;
    cfg.vq_audio_train.epochs = 1;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg
}

fn prepare(cfg: &RunConfig) {
    for c in [Command::GenData, Command::PretrainVq, Command::Train] {
        assert!(run(c, cfg).unwrap().success);
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    prepare(&tiny(a.path()));
    prepare(&tiny(b.path()));
    let ck = |d: &Path| Checkpoint::load(&d.join("generator.json")).unwrap();
    assert_eq!(ck(a.path()).params_hash, ck(b.path()).params_hash);
    let log = |d: &Path| fs::read_to_string(d.join("train_log.jsonl")).unwrap();
    assert_eq!(log(a.path()), log(b.path()));
}

#[test]
fn reloaded_generator_reproduces_its_validation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    prepare(&cfg);
    let corpus = load_run_corpus(&cfg).unwrap();
    let (vq_g, vq_a) = load_vqs(&cfg, &corpus).unwrap();
    let trainer = load_trainer(&cfg, &corpus).unwrap();
    let val: Vec<GestureClip> = filter_sot(
        &corpus.split(Split::Val).cloned().collect::<Vec<_>>(),
        cfg.sot_tau,
    );
    let refs: Vec<&GestureClip> = val.iter().collect();
    let features = prepare_features(&refs, &cfg.model, &cfg.skeleton(), &vq_g, &vq_a).unwrap();
    let again = validation_loss(&trainer.generator, &vq_g, &features, cfg.train.batch_size)
        .unwrap()
        .total;
    let stored = Checkpoint::load(&dir.path().join("generator.json"))
        .unwrap()
        .val_loss
        .unwrap();
    assert_eq!(again, stored);
}

#[test]
fn one_step_moves_the_speaker_space() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    for c in [Command::GenData, Command::PretrainVq] {
        run(c, &cfg).unwrap();
    }
    let corpus = load_run_corpus(&cfg).unwrap();
    let (vq_g, vq_a) = load_vqs(&cfg, &corpus).unwrap();
    let clips: Vec<&GestureClip> = corpus.split(Split::Train).take(4).collect();
    let features = prepare_features(&clips, &cfg.model, &cfg.skeleton(), &vq_g, &vq_a).unwrap();
    let batch = Batch::new(&features.iter().collect::<Vec<_>>()).unwrap();
    let generator = aqgt_core::Generator::new(&cfg.model, &cfg.skeleton(), 1).unwrap();
    let mut trainer = aqgt_core::GenTrainer::new(generator, 2);
    let before = trainer.generator.params.snapshot();
    trainer.step(&vq_g, &batch, 1e-3, 0.0).unwrap();
    let after = trainer.generator.params.snapshot();
    let moved: Vec<&String> = before
        .iter()
        .filter(|(k, v)| k.starts_with("speaker") && after[*k] != **v)
        .map(|(k, _)| k)
        .collect();
    assert!(!moved.is_empty(), "no speaker parameter changed");
}

//! The run harness behind the `aqgt` binary: one function per command, all
//! artifacts written below the run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::{digest_json, GenTrainConfig, ModelConfig, VqConfig, VqTrainConfig};
use crate::data::{
    corpus_checksum, corpus_stats, filter_sot, generate_corpus, load_corpus, save_corpus, Corpus,
    CorpusConfig, GestureClip, Skeleton, Split, FRAME_RATE, SAMPLE_RATE, SOT_TAU,
};
use crate::error::{Error, Result};
use crate::gradsuite::gradient_suite;
use crate::metrics::{
    evaluate_sequences, maje, to_absolute, EvalConfig, ExtractorConfig, ExtractorFile,
    FeatureExtractor, MetricReport,
};
use crate::modalities::gesture_codes;
use crate::model::{clip_features, ClipFeatures, Generator};
use crate::numerics::Tensor;
use crate::quantize::VqVae2;
use crate::train::{
    audio_windows, generate, gesture_windows, prepare_features, pretrain_vq, validation_loss,
    GenTrainer, TrainState,
};

/// Settings of the `synthesize` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Source clip id; the first clip of the evaluation split when absent.
    pub clip: Option<String>,
    pub duration_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clip: None,
            duration_s: 2.0,
        }
    }
}

/// Everything a command reads. Written back as `config.json` into the run
/// directory of every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    /// Defaults to `<run_dir>/corpus.jsonl`.
    pub corpus_path: Option<PathBuf>,
    /// Directory holding the VQ checkpoints; defaults to `run_dir`.
    pub vq_dir: Option<PathBuf>,
    /// Defaults to `<run_dir>/extractor.json`.
    pub extractor_path: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub vq_gesture_train: VqTrainConfig,
    pub vq_audio_train: VqTrainConfig,
    pub train: GenTrainConfig,
    pub extractor: ExtractorConfig,
    pub eval: EvalConfig,
    pub synthesize: SynthConfig,
    pub sot_tau: f64,
    pub eval_split: Split,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            corpus_path: None,
            vq_dir: None,
            extractor_path: None,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            vq_gesture_train: VqTrainConfig::default(),
            vq_audio_train: VqTrainConfig {
                epochs: 3,
                ..VqTrainConfig::default()
            },
            train: GenTrainConfig::default(),
            extractor: ExtractorConfig::default(),
            eval: EvalConfig::default(),
            synthesize: SynthConfig::default(),
            sot_tau: SOT_TAU,
            eval_split: Split::Test,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.vq_gesture_train.validate("vq_gesture_train")?;
        self.vq_audio_train.validate("vq_audio_train")?;
        self.train.validate()?;
        if self.corpus.speakers > self.model.inputs.speakers {
            return Err(Error::config(
                "model.inputs.speakers",
                format!(
                    "corpus has {} speakers, the model only {}",
                    self.corpus.speakers, self.model.inputs.speakers
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.sot_tau) {
            return Err(Error::config("sot_tau", "must lie in [0, 1]"));
        }
        if !(self.synthesize.duration_s > 0.0) {
            return Err(Error::config("synthesize.duration_s", "must be positive"));
        }
        if self.eval.pair_count == 0 || self.eval.repeats == 0 {
            return Err(Error::config(
                "eval",
                "pair_count and repeats must be positive",
            ));
        }
        Ok(())
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.corpus_path
            .clone()
            .unwrap_or_else(|| self.run_dir.join("corpus.jsonl"))
    }

    pub fn vq_dir(&self) -> PathBuf {
        self.vq_dir.clone().unwrap_or_else(|| self.run_dir.clone())
    }

    pub fn extractor_path(&self) -> PathBuf {
        self.extractor_path
            .clone()
            .unwrap_or_else(|| self.run_dir.join("extractor.json"))
    }

    pub fn skeleton(&self) -> Skeleton {
        Skeleton::preset(self.model.skeleton)
    }
}

/// Architectural variants of the `ablate` command.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Gru,
    Transformer,
    VqG,
    Aligner,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Gru,
        Ablation::Transformer,
        Ablation::VqG,
        Ablation::Aligner,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Gru => "gru",
            Ablation::Transformer => "transformer",
            Ablation::VqG => "vq_g",
            Ablation::Aligner => "aligner",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Model config with this component removed.
    pub fn apply(self, model: &ModelConfig) -> ModelConfig {
        let mut m = model.clone();
        match self {
            Ablation::Gru => m.seq.use_gru = false,
            Ablation::Transformer => m.seq.use_transformer = false,
            Ablation::VqG => m.aligner.use_vq_g = false,
            Ablation::Aligner => m.aligner.use_aligner = false,
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Stats,
    PretrainVq,
    Train,
    Synthesize,
    Evaluate,
    Gradcheck,
    Ablate(Ablation),
}

/// Result of one command: a human summary for the terminal and whether the
/// command's own check passed.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub summary: String,
    pub success: bool,
}

impl Outcome {
    fn ok(summary: String) -> Self {
        Outcome {
            summary,
            success: true,
        }
    }
}

pub const CONFIG_FILE: &str = "config.json";
pub const VQ_GESTURE_FILE: &str = "vq_gesture.json";
pub const VQ_AUDIO_FILE: &str = "vq_audio.json";
pub const GENERATOR_FILE: &str = "generator.json";
pub const CRITIC_FILE: &str = "critic.json";
pub const STATE_FILE: &str = "train_state.json";
pub const SUMMARY_FILE: &str = "train_summary.json";
pub const METRICS_FILE: &str = "metrics.json";

pub fn run(command: Command, cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    create_dir(&cfg.run_dir)?;
    write_json(&cfg.run_dir.join(CONFIG_FILE), cfg)?;
    match command {
        Command::GenData => gen_data(cfg),
        Command::Stats => stats(cfg),
        Command::PretrainVq => pretrain(cfg),
        Command::Train => train(cfg),
        Command::Synthesize => synthesize(cfg),
        Command::Evaluate => evaluate(cfg).map(|r| Outcome::ok(metric_summary(&r))),
        Command::Gradcheck => gradcheck(cfg),
        Command::Ablate(a) => ablate(cfg, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(tag)
}

fn gen_data(cfg: &RunConfig) -> Result<Outcome> {
    let corpus = generate_corpus(&cfg.corpus, &cfg.skeleton(), cfg.seed)?;
    let path = cfg.corpus_path();
    save_corpus(&corpus, &path)?;
    Ok(Outcome::ok(format!(
        "wrote {} clips to {} (checksum {})",
        corpus.clips.len(),
        path.display(),
        corpus_checksum(&corpus)
    )))
}

/// Loads the corpus and checks it was generated for this config.
pub fn load_run_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let corpus = load_corpus(&cfg.corpus_path())?;
    if corpus.skeleton.frame_dim() != cfg.skeleton().frame_dim() {
        return Err(Error::config(
            "model.skeleton",
            format!(
                "corpus has {} joints, the model skeleton {}",
                corpus.skeleton.joints(),
                cfg.skeleton().joints()
            ),
        ));
    }
    if corpus.config != cfg.corpus || corpus.seed != cfg.seed {
        return Err(Error::config(
            "corpus",
            "the corpus file was generated with a different corpus config or seed",
        ));
    }
    Ok(corpus)
}

fn sot_split(corpus: &Corpus, split: Split, tau: f64) -> Vec<GestureClip> {
    let clips: Vec<GestureClip> = corpus.split(split).cloned().collect();
    filter_sot(&clips, tau)
}

fn stats(cfg: &RunConfig) -> Result<Outcome> {
    let corpus = load_run_corpus(cfg)?;
    let s = corpus_stats(&corpus, cfg.sot_tau);
    write_json(&cfg.run_dir.join("stats.json"), &s)?;
    Ok(Outcome::ok(s.table()))
}

fn vq_hash(vq: &VqConfig, input_dim: usize) -> String {
    digest_json(&(vq, input_dim))
}

fn gesture_input(cfg: &RunConfig) -> usize {
    cfg.model.vq_gesture.window * cfg.skeleton().frame_dim()
}

fn audio_input(cfg: &RunConfig) -> usize {
    cfg.model.vq_audio.window
}

fn pretrain(cfg: &RunConfig) -> Result<Outcome> {
    let corpus = load_run_corpus(cfg)?;
    let checksum = corpus_checksum(&corpus);
    let clips = sot_split(&corpus, Split::Train, cfg.sot_tau);
    if clips.is_empty() {
        return Err(Error::domain(
            "pretrain-vq",
            "no training clips pass the SoT filter",
        ));
    }
    let refs: Vec<&GestureClip> = clips.iter().collect();
    let fd = cfg.skeleton().frame_dim();
    let vq_dir = cfg.vq_dir();
    create_dir(&vq_dir)?;
    let mut log = Vec::new();
    let mut summary = String::new();

    let g_cfg = &cfg.model.vq_gesture;
    let windows = gesture_windows(&refs, g_cfg.window, fd, cfg.vq_gesture_train.stride)?;
    let mut vq_g = VqVae2::new(g_cfg, gesture_input(cfg), sub_seed(cfg.seed, 1));
    let records = pretrain_vq(
        &mut vq_g,
        &windows,
        &cfg.vq_gesture_train,
        &cfg.model.adversarial,
        sub_seed(cfg.seed, 2),
    )?;
    for r in &records {
        log.push(serde_json::json!({"model": "vq_gesture", "record": r}));
    }
    let last = records.last();
    let _ = writeln!(
        summary,
        "vq_gesture: {} windows, reconstruction {:.5}, perplexity {:.1}/{:.1}",
        windows.shape()[0],
        last.map_or(f64::NAN, |r| r.reconstruction),
        last.map_or(f64::NAN, |r| r.perplexity_top),
        last.map_or(f64::NAN, |r| r.perplexity_bottom)
    );
    Checkpoint::new(
        CheckpointKind::VqGesture,
        vq_hash(g_cfg, gesture_input(cfg)),
        &checksum,
        records.len(),
        last.map(|r| r.loss),
        &vq_g.params,
    )
    .save(&vq_dir.join(VQ_GESTURE_FILE))?;

    let a_cfg = &cfg.model.vq_audio;
    let windows = audio_windows(&refs)?;
    let mut vq_a = VqVae2::new(a_cfg, audio_input(cfg), sub_seed(cfg.seed, 3));
    let records = pretrain_vq(
        &mut vq_a,
        &windows,
        &cfg.vq_audio_train,
        &cfg.model.adversarial,
        sub_seed(cfg.seed, 4),
    )?;
    for r in &records {
        log.push(serde_json::json!({"model": "vq_audio", "record": r}));
    }
    let last = records.last();
    let _ = writeln!(
        summary,
        "vq_audio: {} windows, reconstruction {:.5}",
        windows.shape()[0],
        last.map_or(f64::NAN, |r| r.reconstruction)
    );
    Checkpoint::new(
        CheckpointKind::VqAudio,
        vq_hash(a_cfg, audio_input(cfg)),
        &checksum,
        records.len(),
        last.map(|r| r.loss),
        &vq_a.params,
    )
    .save(&vq_dir.join(VQ_AUDIO_FILE))?;
    write_jsonl(&cfg.run_dir.join("vq_log.jsonl"), &log)?;
    Ok(Outcome::ok(summary))
}

fn load_vq(
    path: &Path,
    kind: CheckpointKind,
    vq_cfg: &VqConfig,
    input_dim: usize,
    checksum: &str,
) -> Result<VqVae2> {
    let ck = Checkpoint::load(path)?;
    ck.expect(kind, &vq_hash(vq_cfg, input_dim))?;
    if ck.corpus_checksum != checksum {
        return Err(Error::Contract(format!(
            "{} was trained on a different corpus",
            path.display()
        )));
    }
    let mut vq = VqVae2::new(vq_cfg, input_dim, 0);
    ck.restore_into(&mut vq.params)?;
    vq.freeze();
    Ok(vq)
}

/// Frozen VQ_G and VQ_A of a run.
pub fn load_vqs(cfg: &RunConfig, corpus: &Corpus) -> Result<(VqVae2, VqVae2)> {
    let checksum = corpus_checksum(corpus);
    let dir = cfg.vq_dir();
    let g = load_vq(
        &dir.join(VQ_GESTURE_FILE),
        CheckpointKind::VqGesture,
        &cfg.model.vq_gesture,
        gesture_input(cfg),
        &checksum,
    )?;
    let a = load_vq(
        &dir.join(VQ_AUDIO_FILE),
        CheckpointKind::VqAudio,
        &cfg.model.vq_audio,
        audio_input(cfg),
        &checksum,
    )?;
    Ok((g, a))
}

fn features_of(
    cfg: &RunConfig,
    clips: &[GestureClip],
    vq_g: &VqVae2,
    vq_a: &VqVae2,
) -> Result<Vec<ClipFeatures>> {
    let refs: Vec<&GestureClip> = clips.iter().collect();
    prepare_features(&refs, &cfg.model, &cfg.skeleton(), vq_g, vq_a)
}

/// Training-set fit of the untrained and the trained generator, written as
/// `train_summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub clips: usize,
    pub epochs: usize,
    pub steps: usize,
    pub initial_rel: f64,
    pub final_rel: f64,
    pub initial_maje: f64,
    pub final_maje: f64,
}

/// Deterministic `L_rel` and MAJE of `generator` against the clips' targets.
pub fn training_fit(
    skeleton: &Skeleton,
    generator: &Generator,
    vq_g: &VqVae2,
    clips: &[ClipFeatures],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let rel = validation_loss(generator, vq_g, clips, batch_size)?.rel;
    let out = generate(generator, vq_g, clips, batch_size)?;
    let mut sum = 0.0;
    for (g, c) in out.iter().zip(clips) {
        sum += maje(
            &to_absolute(skeleton, &c.target)?,
            &to_absolute(skeleton, g)?,
        )?;
    }
    Ok((rel, sum / clips.len() as f64))
}

fn save_generator(cfg: &RunConfig, trainer: &GenTrainer, checksum: &str) -> Result<()> {
    let s = &trainer.state;
    let hash = cfg.model.hash();
    let (epoch, val) = (s.stopper.best_epoch, s.stopper.best);
    Checkpoint::new(
        CheckpointKind::Generator,
        &hash,
        checksum,
        epoch,
        val,
        &trainer.generator.params,
    )
    .save(&cfg.run_dir.join(GENERATOR_FILE))?;
    Checkpoint::new(
        CheckpointKind::Critic,
        &hash,
        checksum,
        epoch,
        val,
        &trainer.critic.params,
    )
    .save(&cfg.run_dir.join(CRITIC_FILE))?;
    write_json(&cfg.run_dir.join(STATE_FILE), s)
}

fn train(cfg: &RunConfig) -> Result<Outcome> {
    let corpus = load_run_corpus(cfg)?;
    let checksum = corpus_checksum(&corpus);
    let (vq_g, vq_a) = load_vqs(cfg, &corpus)?;
    let train_set = features_of(
        cfg,
        &sot_split(&corpus, Split::Train, cfg.sot_tau),
        &vq_g,
        &vq_a,
    )?;
    let val_set = features_of(
        cfg,
        &sot_split(&corpus, Split::Val, cfg.sot_tau),
        &vq_g,
        &vq_a,
    )?;
    let generator = Generator::new(&cfg.model, &cfg.skeleton(), sub_seed(cfg.seed, 5))?;
    let skeleton = cfg.skeleton();
    let bs = cfg.train.batch_size;
    let (initial_rel, initial_maje) = if train_set.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        training_fit(&skeleton, &generator, &vq_g, &train_set, bs)?
    };
    let mut trainer = GenTrainer::new(generator, sub_seed(cfg.seed, 6));
    let mut log = Vec::new();
    let result = trainer.train(&vq_g, &train_set, &val_set, &cfg.train, |r| {
        log.push(r.clone())
    });
    write_jsonl(&cfg.run_dir.join("train_log.jsonl"), &log)?;
    if let Err(e) = result {
        if trainer.state.stopper.best.is_some() {
            save_generator(cfg, &trainer, &checksum)?;
            log::error!(
                "training aborted; best checkpoint retained in {}",
                cfg.run_dir.display()
            );
        }
        return Err(e);
    }
    save_generator(cfg, &trainer, &checksum)?;
    let (final_rel, final_maje) =
        training_fit(&skeleton, &trainer.generator, &vq_g, &train_set, bs)?;
    let s = &trainer.state;
    let summary = TrainSummary {
        clips: train_set.len(),
        epochs: s.epoch,
        steps: s.step,
        initial_rel,
        final_rel,
        initial_maje,
        final_maje,
    };
    write_json(&cfg.run_dir.join(SUMMARY_FILE), &summary)?;
    Ok(Outcome::ok(format!(
        "trained {} epochs ({} steps) on {} clips; best validation loss {:.5} at epoch {}",
        s.epoch,
        s.step,
        train_set.len(),
        s.stopper.best.unwrap_or(f64::NAN),
        s.stopper.best_epoch
    )))
}

/// Generator, critic and train state restored from a run directory.
pub fn load_trainer(cfg: &RunConfig, corpus: &Corpus) -> Result<GenTrainer> {
    let checksum = corpus_checksum(corpus);
    let hash = cfg.model.hash();
    let mut generator = Generator::new(&cfg.model, &cfg.skeleton(), 0)?;
    let g = Checkpoint::load(&cfg.run_dir.join(GENERATOR_FILE))?;
    g.expect(CheckpointKind::Generator, &hash)?;
    if g.corpus_checksum != checksum {
        return Err(Error::Contract(
            "generator was trained on a different corpus".into(),
        ));
    }
    g.restore_into(&mut generator.params)?;
    let mut trainer = GenTrainer::new(generator, 0);
    let c = Checkpoint::load(&cfg.run_dir.join(CRITIC_FILE))?;
    c.expect(CheckpointKind::Critic, &hash)?;
    c.restore_into(&mut trainer.critic.params)?;
    let state: TrainState = read_json(&cfg.run_dir.join(STATE_FILE))?;
    Ok(GenTrainer::restore(
        trainer.generator,
        trainer.critic,
        state,
    ))
}

fn sub_clip(clip: &GestureClip, start: usize, frames: usize, frame_dim: usize) -> GestureClip {
    let joints = frame_dim / 3;
    let samples_per_frame = SAMPLE_RATE as f64 / FRAME_RATE;
    let a0 = (start as f64 * samples_per_frame).round() as usize;
    let a1 = (((start + frames) as f64 * samples_per_frame).round() as usize).min(clip.audio.len());
    GestureClip {
        id: clip.id.clone(),
        speaker: clip.speaker,
        split: clip.split,
        n_frames: frames,
        frames: clip.frames[start * frame_dim..(start + frames) * frame_dim].to_vec(),
        confidences: clip.confidences[start * joints..(start + frames) * joints].to_vec(),
        tokens: clip.tokens.clone(),
        audio: clip.audio[a0.min(a1)..a1].to_vec(),
    }
}

fn synthesize(cfg: &RunConfig) -> Result<Outcome> {
    let corpus = load_run_corpus(cfg)?;
    let (vq_g, vq_a) = load_vqs(cfg, &corpus)?;
    let trainer = load_trainer(cfg, &corpus)?;
    let skeleton = cfg.skeleton();
    let fd = skeleton.frame_dim();
    let source = match &cfg.synthesize.clip {
        Some(id) => corpus.clips.iter().find(|c| &c.id == id).ok_or_else(|| {
            Error::config("synthesize.clip", format!("no clip `{id}` in the corpus"))
        })?,
        None => corpus
            .split(cfg.eval_split)
            .find(|c| c.median_confidence() >= cfg.sot_tau)
            .ok_or_else(|| Error::domain("synthesize", "evaluation split has no usable clip"))?,
    };
    let (n, m) = (cfg.model.inputs.seed_frames, cfg.model.inputs.gen_frames);
    let frames = (cfg.synthesize.duration_s * FRAME_RATE).round() as usize;
    let chunks = frames.div_ceil(m).max(1);
    let needed = n + chunks * m;
    if source.n_frames < needed {
        return Err(Error::domain(
            "synthesize",
            format!(
                "clip {} has {} frames, {needed} needed for {:.2} s",
                source.id, source.n_frames, cfg.synthesize.duration_s
            ),
        ));
    }
    let mut generated: Vec<f64> = Vec::with_capacity(chunks * m * fd);
    let mut seed: Option<Tensor> = None;
    for k in 0..chunks {
        let part = sub_clip(source, k * m, n + m, fd);
        let mut features = clip_features(&part, &cfg.model, fd, &vq_g, &vq_a)?;
        if let Some(s) = seed.take() {
            features.codes = gesture_codes(&vq_g, &s)?.concat();
            features.seed = s;
        }
        let out = generate(
            &trainer.generator,
            &vq_g,
            std::slice::from_ref(&features),
            1,
        )?
        .remove(0);
        generated.extend_from_slice(out.data());
        seed = Some(Tensor::new(
            vec![n, fd],
            out.data()[(m - n) * fd..].to_vec(),
        )?);
    }
    generated.truncate(frames * fd);
    let rel = Tensor::new(vec![frames, fd], generated)?;
    let abs = to_absolute(&skeleton, &rel)?;

    let out_clip = {
        let mut c = sub_clip(source, n, frames, fd);
        c.id = format!("{}-synth", source.id);
        c.frames = rel.data().to_vec();
        c.confidences = vec![1.0; frames * skeleton.joints()];
        c
    };
    let out = Corpus {
        version: corpus.version.clone(),
        seed: cfg.seed,
        skeleton: skeleton.clone(),
        config: cfg.corpus.clone(),
        clips: vec![out_clip],
    };
    save_corpus(&out, &cfg.run_dir.join("synth.jsonl"))?;
    let mut csv = String::from("frame,joint,x,y,z\n");
    for f in 0..frames {
        for (j, name) in skeleton.names().iter().enumerate() {
            let p = &abs.data()[f * fd + 3 * j..f * fd + 3 * j + 3];
            let _ = writeln!(csv, "{f},{name},{},{},{}", p[0], p[1], p[2]);
        }
    }
    let path = cfg.run_dir.join("synth.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(Outcome::ok(format!(
        "synthesized {frames} frames ({:.2} s at {FRAME_RATE} fps) from clip {}",
        frames as f64 / FRAME_RATE,
        source.id
    )))
}

fn absolute_sequence(skeleton: &Skeleton, frames: &[f64], n_frames: usize) -> Result<Tensor> {
    to_absolute(
        skeleton,
        &Tensor::new(vec![n_frames, skeleton.frame_dim()], frames.to_vec())?,
    )
}

/// Loads the extractor at the configured path, or trains one on the
/// ground-truth training clips and stores it there.
pub fn extractor_for(cfg: &RunConfig, corpus: &Corpus) -> Result<FeatureExtractor> {
    let path = cfg.extractor_path();
    let skeleton = cfg.skeleton();
    let seed = sub_seed(cfg.seed, 7);
    if path.exists() {
        let file: ExtractorFile = read_json(&path)?;
        let fe = FeatureExtractor::from_file(&file)?;
        if fe.config != cfg.extractor || fe.frame_dim != skeleton.frame_dim() || fe.seed != seed {
            return Err(Error::config(
                "extractor",
                format!("{} was built with different settings", path.display()),
            ));
        }
        return Ok(fe);
    }
    let clips = sot_split(corpus, Split::Train, cfg.sot_tau);
    let real: Vec<Tensor> = clips
        .iter()
        .map(|c| absolute_sequence(&skeleton, &c.frames, c.n_frames))
        .collect::<Result<_>>()?;
    let mut fe = FeatureExtractor::new(&cfg.extractor, skeleton.frame_dim(), seed)?;
    let history = fe.train(&real)?;
    log::info!(
        "feature extractor trained: final loss {:.6}",
        history.last().copied().unwrap_or(f64::NAN)
    );
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(&path, &fe.to_file())?;
    Ok(fe)
}

fn evaluate(cfg: &RunConfig) -> Result<MetricReport> {
    let corpus = load_run_corpus(cfg)?;
    let (vq_g, vq_a) = load_vqs(cfg, &corpus)?;
    let trainer = load_trainer(cfg, &corpus)?;
    let extractor = extractor_for(cfg, &corpus)?;
    let skeleton = cfg.skeleton();
    let clips = features_of(
        cfg,
        &sot_split(&corpus, cfg.eval_split, cfg.sot_tau),
        &vq_g,
        &vq_a,
    )?;
    if clips.is_empty() {
        return Err(Error::domain(
            "evaluate",
            "evaluation split has no usable clips",
        ));
    }
    let generated = generate(&trainer.generator, &vq_g, &clips, cfg.train.batch_size)?;
    let m = cfg.model.inputs.gen_frames;
    let real_abs: Vec<Tensor> = clips
        .iter()
        .map(|c| absolute_sequence(&skeleton, c.target.data(), m))
        .collect::<Result<_>>()?;
    let gen_abs: Vec<Tensor> = generated
        .iter()
        .map(|g| to_absolute(&skeleton, g))
        .collect::<Result<_>>()?;
    let report = evaluate_sequences(&extractor, &real_abs, &gen_abs, &cfg.eval)?;
    write_json(&cfg.run_dir.join(METRICS_FILE), &report)?;
    Ok(report)
}

fn metric_summary(r: &MetricReport) -> String {
    format!(
        "FGD {:.4}  Diversity {:.4}  MAJE {:.5}  (extractor {}, seed {})",
        r.fgd, r.diversity, r.maje, r.extractor_hash, r.seed
    )
}

fn gradcheck(cfg: &RunConfig) -> Result<Outcome> {
    let report = gradient_suite(cfg.seed)?;
    write_json(&cfg.run_dir.join("gradcheck.json"), &report)?;
    let mut summary = String::new();
    for e in &report.entries {
        let mark = if e.max_rel_error <= report.tolerance {
            "ok  "
        } else {
            "FAIL"
        };
        let _ = writeln!(
            summary,
            "{mark} {:<10} {:<28} {:.3e}",
            e.group, e.name, e.max_rel_error
        );
    }
    let _ = write!(
        summary,
        "max relative error {:.3e} (tolerance {:.0e})",
        report.max_rel_error, report.tolerance
    );
    Ok(Outcome {
        summary,
        success: report.pass,
    })
}

/// Sub-run directory of an ablation below `run_dir`.
pub fn ablation_dir(run_dir: &Path, ablation: Ablation) -> PathBuf {
    run_dir.join(format!("ablate-{}", ablation.name()))
}

fn ablate(cfg: &RunConfig, ablation: Ablation) -> Result<Outcome> {
    let sub = RunConfig {
        run_dir: ablation_dir(&cfg.run_dir, ablation),
        corpus_path: Some(cfg.corpus_path()),
        vq_dir: Some(cfg.vq_dir()),
        extractor_path: Some(cfg.extractor_path()),
        model: ablation.apply(&cfg.model),
        ..cfg.clone()
    };
    sub.validate()?;
    create_dir(&sub.run_dir)?;
    write_json(&sub.run_dir.join(CONFIG_FILE), &sub)?;
    let trained = train(&sub)?;
    let report = evaluate(&sub)?;
    write_json(
        &sub.run_dir.join("ablation.json"),
        &serde_json::json!({"ablation": ablation.name(), "metrics": report}),
    )?;
    Ok(Outcome::ok(format!(
        "without {}: {}\n{}",
        ablation.name(),
        trained.summary,
        metric_summary(&report)
    )))
}

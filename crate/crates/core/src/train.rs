//! Training loops: VQ pretraining against a critic, and the generator with
//! alternating critic updates, schedules and early stopping.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    critic_loss, generator_adv_loss, sample_interpolation, vq_generator_total, Critic,
};
use crate::config::{AdvConfig, GenTrainConfig, ModelConfig, VqTrainConfig};
use crate::data::{GestureClip, Skeleton};
use crate::error::{Error, Result};
use crate::losses::{
    dropout_at_epoch, frame_softmax_cross_entropy, loss_dist, loss_dop, loss_kld,
    loss_reconstruction, loss_style, loss_total, lr_at_epoch, probability_huber, EarlyStopping,
    LossTerms, LossValues,
};
use crate::modalities::audio_segments;
use crate::model::{clip_features, Batch, ClipFeatures, Generator};
use crate::numerics::{Adam, Bound, Dropout, Tape, Tensor};
use crate::quantize::{codebook_perplexity, VqVae2};

/// Flattened `window`-frame slices of every clip, hop `stride`; `[n, window·frame_dim]`.
pub fn gesture_windows(
    clips: &[&GestureClip],
    window: usize,
    frame_dim: usize,
    stride: usize,
) -> Result<Tensor> {
    let width = window * frame_dim;
    let mut data = Vec::new();
    for clip in clips {
        let mut start = 0;
        while start + window <= clip.n_frames {
            data.extend_from_slice(&clip.frames[start * frame_dim..start * frame_dim + width]);
            start += stride.max(1);
        }
    }
    if data.is_empty() {
        return Err(Error::domain(
            "gesture_windows",
            format!("no clip holds {window} frames"),
        ));
    }
    Tensor::new(vec![data.len() / width, width], data)
}

/// Every audio segment of every clip, `[n, SEGMENT_SAMPLES]`.
pub fn audio_windows(clips: &[&GestureClip]) -> Result<Tensor> {
    let mut rows = 0;
    let mut data = Vec::new();
    for clip in clips {
        let seg = audio_segments(&clip.audio);
        rows += seg.shape()[0];
        data.extend_from_slice(seg.data());
    }
    if rows == 0 {
        return Err(Error::domain("audio_windows", "no audio"));
    }
    let width = data.len() / rows;
    Tensor::new(vec![rows, width], data)
}

fn rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let w = x.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * w..(i + 1) * w]);
    }
    Tensor::new(vec![idx.len(), w], data)
}

/// Overwrites codebook entries with encoder outputs of random windows:
/// every entry when `all`, otherwise those with zero usage.
fn reseed_codebooks(
    vq: &mut VqVae2,
    windows: &Tensor,
    rng: &mut ChaCha8Rng,
    all: bool,
) -> Result<usize> {
    let n = windows.shape()[0];
    let pick: Vec<usize> = (0..n.min(256)).map(|_| rng.random_range(0..n)).collect();
    let enc = vq.encode(&rows(windows, &pick)?)?;
    let d = vq.config.latent_dim;
    let mut reseeded = 0;
    for (book, latents) in [
        (&vq.codebook_top, &enc.z_e_top),
        (&vq.codebook_bottom, &enc.z_e_bottom),
    ] {
        let candidates = latents.numel() / d;
        let entries = vq.params.get_mut(book.entries).data_mut();
        for k in 0..book.size {
            if all || book.usage[k] == 0 {
                let r = rng.random_range(0..candidates);
                entries[k * d..(k + 1) * d].copy_from_slice(&latents.data()[r * d..(r + 1) * d]);
                reseeded += 1;
            }
        }
    }
    Ok(reseeded)
}

/// One line of the VQ pretraining log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqEpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean `β·L_vq + γ·L_adv` over the epoch.
    pub loss: f64,
    pub reconstruction: f64,
    pub critic_loss: f64,
    pub perplexity_top: f64,
    pub perplexity_bottom: f64,
}

/// Trains `vq` on `windows` (`[n, input_dim]`), alternating one critic step
/// and one autoencoder step per minibatch. Leaves `vq` unfrozen.
pub fn pretrain_vq(
    vq: &mut VqVae2,
    windows: &Tensor,
    opts: &VqTrainConfig,
    adv: &AdvConfig,
    seed: u64,
) -> Result<Vec<VqEpochRecord>> {
    opts.validate("vq_train")?;
    if windows.rank() != 2 || windows.shape()[1] != vq.input_dim {
        return Err(Error::shape(
            "pretrain_vq",
            format!("windows {:?} for input {}", windows.shape(), vq.input_dim),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut critic = Critic::new(vq.input_dim, adv, rng.random());
    let mut opt_vq = Adam::new(&vq.params);
    let mut opt_c = Adam::new(&critic.params);
    let n = windows.shape()[0];
    let alpha = vq.config.alpha;
    let mut records = Vec::with_capacity(opts.epochs);
    if opts.restart_dead_codes {
        reseed_codebooks(vq, windows, &mut rng, true)?;
    }
    for epoch in 0..opts.epochs {
        if epoch > 0 && opts.restart_dead_codes {
            let k = reseed_codebooks(vq, windows, &mut rng, false)?;
            log::debug!("epoch {epoch}: reseeded {k} unused codebook entries");
        }
        vq.reset_usage();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut rec_sum, mut critic_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(opts.batch_size) {
            let x = rows(windows, chunk)?;
            let b = chunk.len();
            let tape = Tape::new();
            let p = Bound::new(&tape, &vq.params, true);
            let out = vq.forward(&p, tape.constant(x.clone()))?;
            let fake = (*out.x_hat.value()).clone();

            let u = sample_interpolation(b, &mut rng);
            let c_tape = Tape::new();
            let pc = Bound::new(&c_tape, &critic.params, true);
            let c_loss = critic_loss(&critic, &pc, &x, &fake, &u, adv)?;
            let c_grads = pc.grads(&c_tape.backward(c_loss.total)?);
            critic_sum += c_loss.total.item() * b as f64;
            drop(pc);
            opt_c.update(&mut critic.params, &c_grads, opts.lr)?;

            let pc = Bound::frozen(&tape, &critic.params);
            let terms = out.loss(tape.constant(x), alpha)?;
            let adv_loss = generator_adv_loss(&critic, &pc, out.x_hat, adv)?;
            let total = vq_generator_total(terms.total, adv_loss, adv)?;
            if !total.item().is_finite() {
                return Err(Error::NonFinite("vq pretraining loss".into()));
            }
            loss_sum += total.item() * b as f64;
            rec_sum += terms.reconstruction.item() * b as f64;
            let grads = p.grads(&tape.backward(total)?);
            let (it, ib) = (out.idx_top.clone(), out.idx_bottom.clone());
            drop(p);
            opt_vq.update(&mut vq.params, &grads, opts.lr)?;
            vq.record_usage(&it, &ib);
        }
        let record = VqEpochRecord {
            epoch,
            lr: opts.lr,
            loss: loss_sum / n as f64,
            reconstruction: rec_sum / n as f64,
            critic_loss: critic_sum / n as f64,
            perplexity_top: vq.codebook_top.perplexity()?,
            perplexity_bottom: vq.codebook_bottom.perplexity()?,
        };
        log::info!(
            "vq epoch {epoch}: loss {:.5} recon {:.5} critic {:.5} perplexity {:.2}/{:.2}",
            record.loss,
            record.reconstruction,
            record.critic_loss,
            record.perplexity_top,
            record.perplexity_bottom
        );
        records.push(record);
    }
    Ok(records)
}

/// Generator inputs for every clip long enough to hold `N + M` frames.
pub fn prepare_features(
    clips: &[&GestureClip],
    cfg: &ModelConfig,
    skeleton: &Skeleton,
    vq_g: &VqVae2,
    vq_a: &VqVae2,
) -> Result<Vec<ClipFeatures>> {
    let mut out = Vec::with_capacity(clips.len());
    for clip in clips {
        if clip.n_frames < cfg.inputs.positions() {
            log::warn!("skipping clip {}: {} frames", clip.id, clip.n_frames);
            continue;
        }
        out.push(clip_features(clip, cfg, skeleton.frame_dim(), vq_g, vq_a)?);
    }
    Ok(out)
}

/// Deterministic reconstruction terms of one evaluation pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationValues {
    pub rel: f64,
    pub abs: f64,
    pub dist: f64,
    pub dop: f64,
    /// `π₂·(rel + abs) + π₃·dist + π₆·dop`.
    pub total: f64,
}

/// One line of the generator training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub dropout: f64,
    pub train_losses: LossValues,
    pub critic_loss: f64,
    pub val_loss: f64,
    /// Perplexity of the VQ_G codes the aligner selected.
    pub perplexity_top: Option<f64>,
    pub perplexity_bottom: Option<f64>,
}

/// Values of one generator step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossValues,
    pub critic_loss: f64,
    pub codes: Option<(Vec<usize>, Vec<usize>)>,
}

/// Resumable bookkeeping of a generator run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub step: usize,
    pub stopper: EarlyStopping,
    pub records: Vec<EpochRecord>,
    pub opt_generator: Adam,
    pub opt_critic: Adam,
    pub rng_seed: u64,
}

/// Generator, its critic and their optimizer state.
#[derive(Clone, Debug)]
pub struct GenTrainer {
    pub generator: Generator,
    pub critic: Critic,
    pub state: TrainState,
    rng: ChaCha8Rng,
    rc: Tensor,
    best: Option<(BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)>,
}

fn standard_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data)
}

impl GenTrainer {
    pub fn new(generator: Generator, seed: u64) -> Self {
        let frame_dim = generator.frame_dim();
        let m = generator.config.inputs.gen_frames;
        let critic = Critic::new(
            m * frame_dim,
            &generator.config.adversarial,
            seed ^ 0xc417_1c00,
        );
        let state = TrainState {
            epoch: 0,
            step: 0,
            stopper: EarlyStopping::new(generator.config.schedule.patience),
            records: Vec::new(),
            opt_generator: Adam::new(&generator.params),
            opt_critic: Adam::new(&critic.params),
            rng_seed: seed,
        };
        let rc = generator.skeleton.rc_matrix();
        GenTrainer {
            generator,
            critic,
            state,
            rng: ChaCha8Rng::seed_from_u64(seed),
            rc,
            best: None,
        }
    }

    /// Rebuilds a trainer around restored weights and state.
    pub fn restore(generator: Generator, critic: Critic, state: TrainState) -> Self {
        let rc = generator.skeleton.rc_matrix();
        let rng = ChaCha8Rng::seed_from_u64(
            state.rng_seed ^ (state.step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        GenTrainer {
            generator,
            critic,
            state,
            rng,
            rc,
            best: None,
        }
    }

    /// A different speaker for every entry of `speakers`.
    fn other_speakers(&mut self, speakers: &[usize]) -> Vec<usize> {
        let s = self.generator.config.inputs.speakers;
        speakers
            .iter()
            .map(|&sp| {
                let k = self.rng.random_range(0..s - 1);
                if k >= sp {
                    k + 1
                } else {
                    k
                }
            })
            .collect()
    }

    /// One critic update followed by one generator update on `batch`.
    pub fn step(
        &mut self,
        vq_g: &VqVae2,
        batch: &Batch,
        lr: f64,
        dropout: f64,
    ) -> Result<StepReport> {
        let b = batch.len();
        let sp2 = self.other_speakers(&batch.speakers);
        let doubled = batch.doubled(&sp2)?;
        let style_dim = self.generator.config.inputs.style_dim;
        let half = standard_normal(&mut self.rng, &[b, style_dim])?;
        let mut noise = half.data().to_vec();
        noise.extend_from_slice(half.data());
        let noise = Tensor::new(vec![2 * b, style_dim], noise)?;
        let u = sample_interpolation(b, &mut self.rng);
        let mask = Dropout::new(dropout, ChaCha8Rng::seed_from_u64(self.rng.random()));
        let cfg = self.generator.config.clone();
        let m = cfg.inputs.gen_frames;
        let fd = self.generator.frame_dim();

        let tape = Tape::new();
        let p = Bound::new(&tape, &self.generator.params, true).with_dropout(&mask);
        let pv = Bound::frozen(&tape, &vq_g.params);
        let out = self.generator.forward(&p, vq_g, &pv, &doubled, &noise)?;
        let g1 = out.frames.slice(0, 0, b)?;
        let g2 = out.frames.slice(0, b, b)?;
        let g1_flat = g1.reshape(&[b, m * fd])?;

        let real = batch.target_flat();
        let fake = (*g1_flat.value()).clone();
        let c_tape = Tape::new();
        let pc = Bound::new(&c_tape, &self.critic.params, true);
        let c_loss = critic_loss(&self.critic, &pc, &real, &fake, &u, &cfg.adversarial)?;
        let c_grads = pc.grads(&c_tape.backward(c_loss.total)?);
        let critic_value = c_loss.total.item();
        drop(pc);
        self.state
            .opt_critic
            .update(&mut self.critic.params, &c_grads, lr)?;

        let pc = Bound::frozen(&tape, &self.critic.params);
        let gan = generator_adv_loss(&self.critic, &pc, g1_flat, &cfg.adversarial)?;
        let target = tape.constant(batch.target.clone());
        let l = &cfg.loss;
        let (abs, rel) = loss_reconstruction(g1, target, &self.rc, l.huber_threshold)?;
        let sk = &self.generator.skeleton;
        let dist = loss_dist(
            g1,
            target,
            sk.left_arm(),
            sk.right_arm(),
            l.huber_threshold,
            l.dist_literal_plus,
        )?;
        let dop = loss_dop(g1, target, l.huber_threshold)?;
        let kld = loss_kld(out.style.mu, out.style.logvar)?;
        let f_st = frame_softmax_cross_entropy(g1, g2)?;
        let probs = out.speaker_probs;
        let f_sp = probability_huber(
            probs.slice(0, 0, b)?,
            probs.slice(0, b, b)?,
            l.huber_threshold,
        )?;
        let speakers = &self.generator.speakers;
        let emb1 = speakers.embed(&p, &batch.speakers)?;
        let emb2 = speakers.embed(&p, &sp2)?;
        let style = loss_style(f_st, f_sp, emb1, emb2, l.style_epsilon)?;
        let terms = LossTerms {
            gan,
            rel,
            abs,
            dist,
            style,
            kld,
            dop,
        };
        let total = loss_total(&terms, l)?;
        let losses = terms.values(total.item());
        let grads = p.grads(&tape.backward(total)?);
        let codes = out.codes.clone();
        drop(p);
        self.state
            .opt_generator
            .update(&mut self.generator.params, &grads, lr)?;
        if !self.generator.params.all_finite() || !self.critic.params.all_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        Ok(StepReport {
            losses,
            critic_loss: critic_value,
            codes,
        })
    }

    fn snapshot_best(&mut self) {
        self.best = Some((
            self.generator.params.snapshot(),
            self.critic.params.snapshot(),
        ));
    }

    /// Puts the best-validation weights back, if any were recorded.
    pub fn restore_best(&mut self) -> Result<bool> {
        match &self.best {
            Some((g, c)) => {
                self.generator.params.load_snapshot(g)?;
                self.critic.params.load_snapshot(c)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    /// Runs epochs until `cfg.epochs`, `cfg.max_steps` or early stopping,
    /// then restores the best-validation weights. `on_epoch` sees each record
    /// as it is produced.
    pub fn train(
        &mut self,
        vq_g: &VqVae2,
        train: &[ClipFeatures],
        val: &[ClipFeatures],
        cfg: &GenTrainConfig,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::domain("train_generator", "empty training set"));
        }
        let val = if val.is_empty() { train } else { val };
        let sched = self.generator.config.schedule.clone();
        let speakers = self.generator.config.inputs.speakers;
        while self.state.epoch < cfg.epochs {
            let epoch = self.state.epoch;
            let lr = lr_at_epoch(&sched, epoch);
            let dropout = if cfg.dropout {
                dropout_at_epoch(&sched, epoch)
            } else {
                0.0
            };
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut self.rng);
            let mut losses = LossValues::default();
            let (mut critic_sum, mut seen) = (0.0, 0);
            let mut usage_top = vec![0u64; self.generator.config.vq_gesture.codebook_size];
            let mut usage_bottom = usage_top.clone();
            let mut quantized = false;
            for chunk in order.chunks(cfg.batch_size) {
                if cfg.max_steps.is_some_and(|s| self.state.step >= s) {
                    break;
                }
                let items: Vec<&ClipFeatures> = chunk.iter().map(|&i| &train[i]).collect();
                let batch = Batch::new(&items)?;
                if batch.speakers.iter().any(|&s| s >= speakers) {
                    return Err(Error::domain(
                        "train_generator",
                        "speaker id outside the configured speaker count",
                    ));
                }
                let report = match self.step(vq_g, &batch, lr, dropout) {
                    Ok(r) => r,
                    Err(e) => {
                        self.restore_best()?;
                        return Err(e);
                    }
                };
                self.state.step += 1;
                seen += chunk.len();
                losses.accumulate(&report.losses, chunk.len());
                critic_sum += report.critic_loss * chunk.len() as f64;
                if let Some((top, bottom)) = &report.codes {
                    quantized = true;
                    top.iter().for_each(|&i| usage_top[i] += 1);
                    bottom.iter().for_each(|&i| usage_bottom[i] += 1);
                }
            }
            if seen == 0 {
                break;
            }
            let val_loss = validation_loss(&self.generator, vq_g, val, cfg.batch_size)?.total;
            if !val_loss.is_finite() {
                self.restore_best()?;
                return Err(Error::NonFinite("validation loss".into()));
            }
            if self.state.stopper.observe(epoch, val_loss) {
                self.snapshot_best();
            }
            let record = EpochRecord {
                epoch,
                lr,
                dropout,
                train_losses: losses,
                critic_loss: critic_sum / seen as f64,
                val_loss,
                perplexity_top: if quantized {
                    Some(codebook_perplexity(&usage_top)?)
                } else {
                    None
                },
                perplexity_bottom: if quantized {
                    Some(codebook_perplexity(&usage_bottom)?)
                } else {
                    None
                },
            };
            log::info!(
                "epoch {epoch}: lr {lr:.3e} total {:.4} rel {:.5} val {val_loss:.5}",
                record.train_losses.total,
                record.train_losses.rel
            );
            on_epoch(&record);
            self.state.records.push(record);
            self.state.epoch += 1;
            if self.state.stopper.should_stop() {
                log::info!(
                    "early stop at epoch {epoch}; best epoch {}",
                    self.state.stopper.best_epoch
                );
                break;
            }
        }
        self.restore_best()?;
        Ok(())
    }
}

/// Deterministic pass (no dropout, zero style noise) producing relative
/// frames `[M, frame_dim]` for every clip.
pub fn generate(
    generator: &Generator,
    vq_g: &VqVae2,
    clips: &[ClipFeatures],
    batch_size: usize,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch_size.max(1)) {
        let items: Vec<&ClipFeatures> = chunk.iter().collect();
        let batch = Batch::new(&items)?;
        let tape = Tape::inference();
        let p = Bound::frozen(&tape, &generator.params);
        let pv = Bound::frozen(&tape, &vq_g.params);
        let noise = Tensor::zeros(&[batch.len(), generator.config.inputs.style_dim]);
        let frames = generator
            .forward(&p, vq_g, &pv, &batch, &noise)?
            .frames
            .value();
        let s = frames.shape();
        let per = s[1] * s[2];
        for i in 0..s[0] {
            out.push(Tensor::new(
                vec![s[1], s[2]],
                frames.data()[i * per..(i + 1) * per].to_vec(),
            )?);
        }
    }
    Ok(out)
}

/// Reconstruction terms of the deterministic generator output against each
/// clip's target, averaged over clips.
pub fn validation_loss(
    generator: &Generator,
    vq_g: &VqVae2,
    clips: &[ClipFeatures],
    batch_size: usize,
) -> Result<ValidationValues> {
    if clips.is_empty() {
        return Err(Error::domain("validation_loss", "no clips"));
    }
    let l = &generator.config.loss;
    let rc = generator.skeleton.rc_matrix();
    let sk = &generator.skeleton;
    let mut acc = ValidationValues::default();
    for chunk in clips.chunks(batch_size.max(1)) {
        let items: Vec<&ClipFeatures> = chunk.iter().collect();
        let batch = Batch::new(&items)?;
        let tape = Tape::inference();
        let p = Bound::frozen(&tape, &generator.params);
        let pv = Bound::frozen(&tape, &vq_g.params);
        let noise = Tensor::zeros(&[batch.len(), generator.config.inputs.style_dim]);
        let g = generator.forward(&p, vq_g, &pv, &batch, &noise)?.frames;
        let target = tape.constant(batch.target.clone());
        let (abs, rel) = loss_reconstruction(g, target, &rc, l.huber_threshold)?;
        let dist = loss_dist(
            g,
            target,
            sk.left_arm(),
            sk.right_arm(),
            l.huber_threshold,
            l.dist_literal_plus,
        )?;
        let dop = loss_dop(g, target, l.huber_threshold)?;
        let w = chunk.len() as f64;
        acc.rel += rel.item() * w;
        acc.abs += abs.item() * w;
        acc.dist += dist.item() * w;
        acc.dop += dop.item() * w;
    }
    let n = clips.len() as f64;
    acc.rel /= n;
    acc.abs /= n;
    acc.dist /= n;
    acc.dop /= n;
    acc.total = l.pi2 * (acc.rel + acc.abs) + l.pi3 * acc.dist + l.pi6 * acc.dop;
    Ok(acc)
}

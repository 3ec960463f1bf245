//! Model and run configuration with strict (unknown-key-rejecting) JSON schemas.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkeletonPreset {
    /// Root, spine, head and two four-joint arms.
    Upper11,
    /// Full body with fingers.
    Full59,
}

/// One hierarchical VQ autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    /// Frames per window for gestures, samples per window for audio.
    pub window: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    /// Bottom-level latent positions; the top level sees them averaged in pairs.
    pub bottom_positions: usize,
    pub codebook_size: usize,
    pub alpha: f64,
}

impl VqConfig {
    pub fn gesture() -> Self {
        VqConfig {
            window: 4,
            hidden: 64,
            latent_dim: 16,
            bottom_positions: 2,
            codebook_size: 512,
            alpha: 0.25,
        }
    }

    pub fn audio() -> Self {
        VqConfig {
            window: 4000,
            hidden: 32,
            latent_dim: 4,
            bottom_positions: 2,
            codebook_size: 512,
            alpha: 0.25,
        }
    }

    pub fn top_positions(&self) -> usize {
        self.bottom_positions / 2
    }

    /// Width of the concatenated top + bottom latent.
    pub fn latent_width(&self) -> usize {
        (self.top_positions() + self.bottom_positions) * self.latent_dim
    }

    fn validate(&self, prefix: &str) -> Result<()> {
        positive(prefix, "window", self.window)?;
        positive(prefix, "hidden", self.hidden)?;
        positive(prefix, "latent_dim", self.latent_dim)?;
        if self.bottom_positions < 2 || !self.bottom_positions.is_multiple_of(2) {
            return Err(Error::config(
                format!("{prefix}.bottom_positions"),
                "must be even and at least 2",
            ));
        }
        if self.codebook_size < 2 {
            return Err(Error::config(
                format!("{prefix}.codebook_size"),
                "a codebook needs at least 2 entries",
            ));
        }
        non_negative(prefix, "alpha", self.alpha)
    }
}

impl Default for VqConfig {
    fn default() -> Self {
        Self::gesture()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvConfig {
    pub delta: f64,
    pub p: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Flip the sign of both critic and generator objectives.
    pub flip_sign: bool,
    pub critic_hidden: Vec<usize>,
    pub critic_slope: f64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            delta: 2.0,
            p: 6.0,
            beta: 1.0,
            gamma: 1.0,
            flip_sign: false,
            critic_hidden: vec![128, 128],
            critic_slope: 0.2,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        non_negative("adversarial", "delta", self.delta)?;
        if !(self.p >= 1.0) {
            return Err(Error::config("adversarial.p", "must be at least 1"));
        }
        non_negative("adversarial", "beta", self.beta)?;
        non_negative("adversarial", "gamma", self.gamma)?;
        if self.critic_hidden.contains(&0) {
            return Err(Error::config(
                "adversarial.critic_hidden",
                "widths must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    /// Seed frames given to the generator (N).
    pub seed_frames: usize,
    /// Frames generated per sequence (M).
    pub gen_frames: usize,
    pub code_embed_dim: usize,
    pub text_dim: usize,
    pub max_tokens: usize,
    pub filterbank_bands: usize,
    pub onset_hidden: usize,
    pub onset_dim: usize,
    pub speaker_embed_dim: usize,
    pub style_dim: usize,
    pub speakers: usize,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            seed_frames: 4,
            gen_frames: 30,
            code_embed_dim: 8,
            text_dim: 16,
            max_tokens: 300,
            filterbank_bands: 8,
            onset_hidden: 8,
            onset_dim: 4,
            speaker_embed_dim: 8,
            style_dim: 8,
            speakers: 2,
        }
    }
}

impl InputConfig {
    pub fn positions(&self) -> usize {
        self.seed_frames + self.gen_frames
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqConfig {
    pub max_heads: usize,
    pub ffn_hidden: usize,
    pub gru2_layers: usize,
    pub use_gru: bool,
    pub use_transformer: bool,
}

impl Default for SeqConfig {
    fn default() -> Self {
        SeqConfig {
            max_heads: 12,
            ffn_hidden: 64,
            gru2_layers: 4,
            use_gru: true,
            use_transformer: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignerConfig {
    pub fc_dim: usize,
    pub hidden: usize,
    /// Decode windows through the gesture VQ model; off means `g_t = p*_t`.
    pub use_vq_g: bool,
    /// Off replaces the whole aligner by an MLP readout of `W`.
    pub use_aligner: bool,
    /// Snap reconstructed latents to the codebooks before decoding.
    pub quantize_latents: bool,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        AlignerConfig {
            fc_dim: 32,
            hidden: 64,
            use_vq_g: true,
            use_aligner: true,
            quantize_latents: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub huber_threshold: f64,
    pub pi1: f64,
    pub pi2: f64,
    pub pi3: f64,
    pub pi4: f64,
    pub pi5: f64,
    pub pi6: f64,
    pub style_epsilon: f64,
    /// Compare `g_l - g_r` against `g*_l + g*_r` instead of `g*_l - g*_r`.
    pub dist_literal_plus: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            huber_threshold: 1.0,
            pi1: 2.0,
            pi2: 20.0,
            pi3: 20.0,
            pi4: 20.0,
            pi5: 0.004,
            pi6: 20.0,
            style_epsilon: 5.0,
            dist_literal_plus: false,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> [f64; 6] {
        [self.pi1, self.pi2, self.pi3, self.pi4, self.pi5, self.pi6]
    }

    fn validate(&self) -> Result<()> {
        if !(self.huber_threshold > 0.0) {
            return Err(Error::config("loss.huber_threshold", "must be positive"));
        }
        for (i, w) in self.weights().iter().enumerate() {
            non_negative("loss", &format!("pi{}", i + 1), *w)?;
        }
        non_negative("loss", "style_epsilon", self.style_epsilon)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub lr_floor: f64,
    pub dropout_step: f64,
    pub dropout_every: usize,
    pub dropout_cap: f64,
    pub patience: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            lr0: 1e-4,
            lr_decay: 0.75,
            lr_decay_every: 20,
            lr_floor: 1e-5,
            dropout_step: 0.05,
            dropout_every: 25,
            dropout_cap: 0.3,
            patience: 50,
        }
    }
}

impl ScheduleConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::config("schedule.lr0", "must be positive"));
        }
        if !(0.0 < self.lr_decay && self.lr_decay <= 1.0) {
            return Err(Error::config("schedule.lr_decay", "must lie in (0, 1]"));
        }
        positive("schedule", "lr_decay_every", self.lr_decay_every)?;
        positive("schedule", "dropout_every", self.dropout_every)?;
        non_negative("schedule", "lr_floor", self.lr_floor)?;
        non_negative("schedule", "dropout_step", self.dropout_step)?;
        if !(0.0..1.0).contains(&self.dropout_cap) {
            return Err(Error::config("schedule.dropout_cap", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Optimization settings for one VQ autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Hop between consecutive training windows.
    pub stride: usize,
    /// Seed the codebooks from encoder outputs and re-seed entries left
    /// unused by an epoch.
    pub restart_dead_codes: bool,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        VqTrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            stride: 2,
            restart_dead_codes: true,
        }
    }
}

impl VqTrainConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        positive(prefix, "epochs", self.epochs)?;
        positive(prefix, "batch_size", self.batch_size)?;
        positive(prefix, "stride", self.stride)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{prefix}.lr"), "must be positive"));
        }
        Ok(())
    }
}

/// Generator optimization settings (schedules live in [`ScheduleConfig`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many generator steps, wherever the epoch stands.
    pub max_steps: Option<usize>,
    /// Apply the dropout schedule; off keeps every pass deterministic.
    pub dropout: bool,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        GenTrainConfig {
            epochs: 200,
            batch_size: 16,
            max_steps: None,
            dropout: true,
        }
    }
}

impl GenTrainConfig {
    pub fn validate(&self) -> Result<()> {
        positive("train", "epochs", self.epochs)?;
        positive("train", "batch_size", self.batch_size)
    }
}

/// Every architectural and loss hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub skeleton: SkeletonPreset,
    pub vq_gesture: VqConfig,
    pub vq_audio: VqConfig,
    pub adversarial: AdvConfig,
    pub inputs: InputConfig,
    pub seq: SeqConfig,
    pub aligner: AlignerConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            skeleton: SkeletonPreset::Upper11,
            vq_gesture: VqConfig::gesture(),
            vq_audio: VqConfig::audio(),
            adversarial: AdvConfig::default(),
            inputs: InputConfig::default(),
            seq: SeqConfig::default(),
            aligner: AlignerConfig::default(),
            loss: LossConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vq_gesture.validate("vq_gesture")?;
        self.vq_audio.validate("vq_audio")?;
        self.adversarial.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        let i = &self.inputs;
        positive("inputs", "seed_frames", i.seed_frames)?;
        if i.gen_frames < 7 {
            return Err(Error::config(
                "inputs.gen_frames",
                "the sixth-order difference needs at least 7 frames",
            ));
        }
        if i.seed_frames != self.vq_gesture.window {
            return Err(Error::config(
                "inputs.seed_frames",
                format!("must equal vq_gesture.window ({})", self.vq_gesture.window),
            ));
        }
        if i.speakers < 2 {
            return Err(Error::config(
                "inputs.speakers",
                "style contrast needs at least 2 speakers",
            ));
        }
        for (name, v) in [
            ("code_embed_dim", i.code_embed_dim),
            ("text_dim", i.text_dim),
            ("max_tokens", i.max_tokens),
            ("filterbank_bands", i.filterbank_bands),
            ("onset_hidden", i.onset_hidden),
            ("onset_dim", i.onset_dim),
            ("speaker_embed_dim", i.speaker_embed_dim),
            ("style_dim", i.style_dim),
        ] {
            positive("inputs", name, v)?;
        }
        if !self.seq.use_gru && !self.seq.use_transformer {
            return Err(Error::config(
                "seq",
                "at least one of use_gru / use_transformer must stay enabled",
            ));
        }
        positive("seq", "max_heads", self.seq.max_heads)?;
        positive("seq", "ffn_hidden", self.seq.ffn_hidden)?;
        positive("aligner", "fc_dim", self.aligner.fc_dim)?;
        positive("aligner", "hidden", self.aligner.hidden)?;
        Ok(())
    }

    /// Short stable digest of the serialized config.
    pub fn hash(&self) -> String {
        digest_json(self)
    }
}

pub(crate) fn digest_json<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config types always serialize");
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

fn positive(prefix: &str, field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(
            format!("{prefix}.{field}"),
            "must be positive",
        ));
    }
    Ok(())
}

fn non_negative(prefix: &str, field: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::config(
            format!("{prefix}.{field}"),
            "must be a finite non-negative number",
        ));
    }
    Ok(())
}

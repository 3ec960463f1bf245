use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::skeleton::Skeleton;
use crate::error::{Error, Result};

pub const FRAME_RATE: f64 = 15.0;
pub const SAMPLE_RATE: usize = 16_000;
pub const FORMAT_VERSION: &str = "1.0";

/// Words of the template grammar; token ids index this list.
pub const VOCAB: &[&str] = &[
    "the",
    "a",
    "this",
    "that",
    "my",
    "your",
    "idea",
    "plan",
    "story",
    "question",
    "result",
    "problem",
    "people",
    "moment",
    "thing",
    "point",
    "is",
    "was",
    "seems",
    "feels",
    "becomes",
    "remains",
    "really",
    "quite",
    "very",
    "simply",
    "big",
    "small",
    "new",
    "old",
    "strange",
    "clear",
    "important",
    "and",
    "but",
    "so",
    "because",
    "then",
    "we",
    "you",
    "they",
    "think",
    "know",
    "see",
    "want",
    "say",
    "here",
    "there",
    "now",
    "today",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One shot: motion in parent-relative offsets plus its speech.
#[derive(Clone, Debug, PartialEq)]
pub struct GestureClip {
    pub id: String,
    pub speaker: usize,
    pub split: Split,
    pub n_frames: usize,
    /// `n_frames × J × 3`, row-major.
    pub frames: Vec<f64>,
    /// `n_frames × J`, each in `[0, 1]`.
    pub confidences: Vec<f64>,
    pub tokens: Vec<u32>,
    /// Mono samples at [`SAMPLE_RATE`].
    pub audio: Vec<f64>,
}

impl GestureClip {
    pub fn duration(&self) -> f64 {
        self.n_frames as f64 / FRAME_RATE
    }

    pub fn frame(&self, f: usize, frame_dim: usize) -> &[f64] {
        &self.frames[f * frame_dim..(f + 1) * frame_dim]
    }

    /// Median over every per-joint, per-frame confidence.
    pub fn median_confidence(&self) -> f64 {
        median(&self.confidences)
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub clips: usize,
    pub speakers: usize,
    pub min_duration: f64,
    pub max_duration: f64,
    /// Arm-motion amplitude of speaker 0.
    pub base_amplitude: f64,
    /// Amplitude added per speaker index.
    pub signature_gap: f64,
    /// Fraction of clips whose tracking confidence collapses (removed by the SoT filter).
    pub bad_clip_rate: f64,
    /// Per joint-frame probability of a zero-confidence dropout.
    pub joint_dropout_rate: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            clips: 16,
            speakers: 2,
            min_duration: 2.4,
            max_duration: 3.2,
            base_amplitude: 0.08,
            signature_gap: 0.06,
            bad_clip_rate: 0.1,
            joint_dropout_rate: 0.02,
            val_fraction: 0.125,
            test_fraction: 0.125,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 {
            return Err(Error::config("corpus.clips", "must be positive"));
        }
        if self.speakers == 0 {
            return Err(Error::config("corpus.speakers", "must be positive"));
        }
        if !(self.min_duration > 0.0
            && self.min_duration <= self.max_duration
            && self.max_duration <= 600.0)
        {
            return Err(Error::config(
                "corpus.min_duration",
                "need 0 < min_duration <= max_duration <= 600",
            ));
        }
        for (name, v) in [
            ("bad_clip_rate", self.bad_clip_rate),
            ("joint_dropout_rate", self.joint_dropout_rate),
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(
                    format!("corpus.{name}"),
                    "must lie in [0, 1]",
                ));
            }
        }
        if self.val_fraction + self.test_fraction >= 1.0 {
            return Err(Error::config(
                "corpus.val_fraction",
                "validation and test leave no training clips",
            ));
        }
        if !(self.base_amplitude >= 0.0 && self.signature_gap >= 0.0) {
            return Err(Error::config(
                "corpus.base_amplitude",
                "amplitudes must be non-negative",
            ));
        }
        Ok(())
    }

    /// Arm amplitude of one speaker.
    pub fn amplitude(&self, speaker: usize) -> f64 {
        self.base_amplitude + self.signature_gap * speaker as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub version: String,
    pub seed: u64,
    pub skeleton: Skeleton,
    pub config: CorpusConfig,
    pub clips: Vec<GestureClip>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &GestureClip> {
        self.clips.iter().filter(move |c| c.split == split)
    }
}

/// Procedural corpus: arm motion driven by the same stroke events that shape
/// the audio energy, with a per-speaker amplitude and tempo.
pub fn generate_corpus(config: &CorpusConfig, skeleton: &Skeleton, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clips = Vec::with_capacity(config.clips);
    for i in 0..config.clips {
        let speaker = i % config.speakers;
        clips.push(generate_clip(config, skeleton, i, speaker, &mut rng));
    }
    let mut order: Vec<usize> = (0..clips.len()).collect();
    order.shuffle(&mut rng);
    let n = clips.len() as f64;
    let n_val = (n * config.val_fraction).round() as usize;
    let n_test = (n * config.test_fraction).round() as usize;
    if n_val + n_test >= clips.len() {
        return Err(Error::config(
            "corpus.clips",
            "too few clips to leave a training split",
        ));
    }
    for (rank, &c) in order.iter().enumerate() {
        clips[c].split = if rank < n_val {
            Split::Val
        } else if rank < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
    }
    Ok(Corpus {
        version: FORMAT_VERSION.to_string(),
        seed,
        skeleton: skeleton.clone(),
        config: config.clone(),
        clips,
    })
}

fn gauss_bump(t: f64, center: f64, width: f64) -> f64 {
    let z = (t - center) / width;
    (-0.5 * z * z).exp()
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn sentence(rng: &mut ChaCha8Rng, out: &mut Vec<u32>) {
    // determiner adjective? noun verb adverb? adjective, optionally joined
    let pick = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.random_range(lo..hi) as u32;
    out.push(pick(rng, 0, 6));
    if rng.random_bool(0.5) {
        out.push(pick(rng, 26, 33));
    }
    out.push(pick(rng, 6, 16));
    out.push(pick(rng, 16, 22));
    if rng.random_bool(0.4) {
        out.push(pick(rng, 22, 26));
    }
    out.push(pick(rng, 26, 33));
    if rng.random_bool(0.3) {
        out.push(pick(rng, 33, 38));
        out.push(pick(rng, 38, 41));
        out.push(pick(rng, 41, 46));
        out.push(pick(rng, 46, 50));
    }
}

fn generate_clip(
    cfg: &CorpusConfig,
    skel: &Skeleton,
    index: usize,
    speaker: usize,
    rng: &mut ChaCha8Rng,
) -> GestureClip {
    let raw = rng.random_range(cfg.min_duration..=cfg.max_duration);
    let n_frames = ((raw * FRAME_RATE).round() as usize).max(1);
    let duration = n_frames as f64 / FRAME_RATE;
    let n_samples = (duration * SAMPLE_RATE as f64).round() as usize;

    let mut strokes = Vec::new();
    let mut t = rng.random_range(0.05..0.35);
    while t < duration {
        strokes.push((t, rng.random_range(0.5..1.0)));
        t += rng.random_range(0.35..0.7);
    }
    let audio_env = |t: f64| {
        strokes
            .iter()
            .map(|&(c, s)| s * gauss_bump(t, c, 0.07))
            .sum::<f64>()
    };
    let motion_env = |t: f64| {
        strokes
            .iter()
            .map(|&(c, s)| s * gauss_bump(t, c, 0.12))
            .sum::<f64>()
            .min(1.0)
    };

    let audio: Vec<f64> = (0..n_samples)
        .map(|k| {
            let n: f64 = StandardNormal.sample(rng);
            f32_round(0.3 * audio_env(k as f64 / SAMPLE_RATE as f64).min(1.5) * n)
        })
        .collect();

    let amp = cfg.amplitude(speaker);
    let tempo = 1.2 + 0.5 * speaker as f64;
    let stroke_freq = 2.5;
    let arm_weights = [0.2, 0.6, 1.0, 0.5];
    let j = skel.joints();
    let rest = skel.rest_frame();
    let mut phases = Vec::new();
    for _ in 0..2 {
        phases.push([
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
        ]);
    }
    let head = skel.index_of("head");
    let mut frames = Vec::with_capacity(n_frames * 3 * j);
    for f in 0..n_frames {
        let t = f as f64 / FRAME_RATE;
        let m = motion_env(t);
        let mut frame = rest.clone();
        for (side, arm) in [skel.left_arm(), skel.right_arm()].into_iter().enumerate() {
            let mirror = if side == 0 { 1.0 } else { -1.0 };
            let ph = phases[side];
            for (k, &joint) in arm.iter().enumerate() {
                let w = arm_weights[k.min(arm_weights.len() - 1)] * amp;
                frame[3 * joint] += mirror * w * (2.0 * PI * tempo * t + ph[0]).sin();
                frame[3 * joint + 1] += 1.5 * w * m * (2.0 * PI * stroke_freq * t + ph[1]).sin();
                frame[3 * joint + 2] += 0.3 * w * (PI * tempo * t + ph[2]).sin();
            }
        }
        if let Some(h) = head {
            frame[3 * h + 1] += 0.2 * amp * m;
        }
        frames.extend(frame.into_iter().map(f32_round));
    }

    let bad = rng.random_bool(cfg.bad_clip_rate);
    let confidences: Vec<f64> = (0..n_frames * j)
        .map(|_| {
            let c = if bad {
                rng.random_range(0.0..0.04)
            } else if rng.random_bool(cfg.joint_dropout_rate) {
                0.0
            } else {
                rng.random_range(0.8..1.0)
            };
            f32_round(c)
        })
        .collect();

    let target_tokens = (duration * 2.5).round() as usize;
    let mut tokens = Vec::new();
    while tokens.len() < target_tokens.max(1) {
        sentence(rng, &mut tokens);
    }

    GestureClip {
        id: format!("clip-{index:05}"),
        speaker,
        split: Split::Train,
        n_frames,
        frames,
        confidences,
        tokens,
        audio,
    }
}

/// Drops clips whose median confidence falls strictly below `tau`.
pub fn filter_sot(clips: &[GestureClip], tau: f64) -> Vec<GestureClip> {
    clips
        .iter()
        .filter(|c| c.median_confidence() >= tau)
        .cloned()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub clips: usize,
    pub kept_after_sot: usize,
    pub total_duration_s: f64,
    pub mean_duration_s: f64,
    pub speakers: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub fn corpus_stats(corpus: &Corpus, tau: f64) -> CorpusStats {
    let total: f64 = corpus.clips.iter().map(GestureClip::duration).sum();
    let n = corpus.clips.len();
    let mut speakers: Vec<usize> = corpus.clips.iter().map(|c| c.speaker).collect();
    speakers.sort_unstable();
    speakers.dedup();
    CorpusStats {
        clips: n,
        kept_after_sot: filter_sot(&corpus.clips, tau).len(),
        total_duration_s: total,
        mean_duration_s: if n == 0 { 0.0 } else { total / n as f64 },
        speakers: speakers.len(),
        train: corpus.split(Split::Train).count(),
        val: corpus.split(Split::Val).count(),
        test: corpus.split(Split::Test).count(),
    }
}

impl CorpusStats {
    /// Plain-text summary table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str("| Dataset   | #SoT | SoT kept (tau) | Total length | Average length of SoT | Speakers |\n");
        s.push_str("|-----------|------|----------------|--------------|-----------------------|----------|\n");
        s.push_str(&format!(
            "| synthetic | {:>4} | {:>14} | {:>10.1} s | {:>19.2} s | {:>8} |\n",
            self.clips,
            self.kept_after_sot,
            self.total_duration_s,
            self.mean_duration_s,
            self.speakers
        ));
        s.push_str(&format!(
            "splits: train {} / val {} / test {}\n",
            self.train, self.val, self.test
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip_with_conf(conf: Vec<f64>) -> GestureClip {
        GestureClip {
            id: "c".into(),
            speaker: 0,
            split: Split::Train,
            n_frames: 1,
            frames: vec![0.0; 3 * conf.len()],
            confidences: conf,
            tokens: vec![],
            audio: vec![],
        }
    }

    #[test]
    fn sot_boundaries() {
        assert_eq!(filter_sot(&[clip_with_conf(vec![1.0; 5])], 0.05).len(), 1);
        assert_eq!(filter_sot(&[clip_with_conf(vec![0.01; 5])], 0.05).len(), 0);
        assert_eq!(
            filter_sot(&[clip_with_conf(vec![0.0, 0.05, 0.9])], 0.05).len(),
            1
        );
        assert_eq!(
            filter_sot(&[clip_with_conf(vec![0.0, 0.0499, 0.9])], 0.05).len(),
            0
        );
    }

    #[test]
    fn even_median_averages_middle_pair() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn lengths_follow_duration() {
        let c = generate_corpus(&CorpusConfig::default(), &Skeleton::upper11(), 3).unwrap();
        for clip in &c.clips {
            let d = clip.duration();
            assert_eq!(clip.frames.len(), clip.n_frames * 33);
            assert_eq!(clip.confidences.len(), clip.n_frames * 11);
            assert!(clip.audio.len().abs_diff((d * SAMPLE_RATE as f64) as usize) <= 1);
            assert!(clip.tokens.iter().all(|&t| (t as usize) < VOCAB.len()));
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let c = generate_corpus(
            &CorpusConfig {
                clips: 40,
                ..Default::default()
            },
            &Skeleton::upper11(),
            9,
        )
        .unwrap();
        let s = corpus_stats(&c, 0.05);
        assert_eq!(s.train + s.val + s.test, 40);
        assert_eq!(s.val, 5);
        assert_eq!(s.test, 5);
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let cfg = CorpusConfig {
            min_duration: 3.0,
            max_duration: 2.0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }
}

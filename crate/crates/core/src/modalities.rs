//! Per-clip input encoders and the fused generator input.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::config::InputConfig;
use crate::data::{FRAME_RATE, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::numerics::{uniform, Activation, Bound, Mlp, ParamId, ParamStore, Tensor, Var};
use crate::quantize::VqVae2;

/// Samples per audio segment (0.25 s at 16 kHz).
pub const SEGMENT_SAMPLES: usize = SAMPLE_RATE / 4;
/// FFT size for onset detection.
pub const ONSET_FFT: usize = 1024;

/// Learned vectors addressed by codebook index.
#[derive(Clone, Debug)]
pub struct CodeEmbedding {
    pub table: ParamId,
    pub size: usize,
    pub dim: usize,
}

impl CodeEmbedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        size: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        CodeEmbedding {
            table: store.add(format!("{name}.table"), uniform(rng, &[size, dim], 0.5)),
            size,
            dim,
        }
    }

    /// `[idx.len(), dim]`.
    pub fn lookup<'t>(&self, p: &Bound<'t>, idx: &[usize]) -> Result<Var<'t>> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.size) {
            return Err(Error::domain(
                "code_embedding",
                format!("index {bad} outside [0, {})", self.size),
            ));
        }
        p.param(self.table).gather_rows(idx)
    }
}

/// Codebook indices of each VQ_G window covering a frame block, top first.
pub fn gesture_codes(vq_g: &VqVae2, frames: &Tensor) -> Result<Vec<Vec<usize>>> {
    if !vq_g.is_frozen() {
        return Err(Error::Contract(
            "gesture embedding requires a frozen VQ_G".into(),
        ));
    }
    let window = vq_g.config.window;
    let s = frames.shape();
    if s.len() != 2 || s[1] * window != vq_g.input_dim {
        return Err(Error::shape(
            "embed_gesture_frames",
            format!("expected [frames, {}], got {s:?}", vq_g.input_dim / window),
        ));
    }
    let n_windows = s[0].div_ceil(window);
    let mut padded = frames.data().to_vec();
    padded.resize(n_windows * vq_g.input_dim, 0.0);
    let enc = vq_g.encode(&Tensor::new(vec![n_windows, vq_g.input_dim], padded)?)?;
    let (pt, pb) = (vq_g.config.top_positions(), vq_g.config.bottom_positions);
    Ok((0..n_windows)
        .map(|w| {
            let mut codes = enc.idx_top[w * pt..(w + 1) * pt].to_vec();
            codes.extend_from_slice(&enc.idx_bottom[w * pb..(w + 1) * pb]);
            codes
        })
        .collect())
}

/// Window code lists to embeddings, `[windows, codes·dim]`.
pub fn embed_codes<'t>(
    p: &Bound<'t>,
    table: &CodeEmbedding,
    codes: &[Vec<usize>],
) -> Result<Var<'t>> {
    let per = codes.first().map_or(0, Vec::len);
    let flat: Vec<usize> = codes.iter().flatten().copied().collect();
    table
        .lookup(p, &flat)?
        .reshape(&[codes.len(), per * table.dim])
}

/// Frozen-VQ_G indices of `frames` mapped through `table`.
pub fn embed_gesture_frames<'t>(
    vq_g: &VqVae2,
    p: &Bound<'t>,
    table: &CodeEmbedding,
    frames: &Tensor,
) -> Result<Var<'t>> {
    embed_codes(p, table, &gesture_codes(vq_g, frames)?)
}

fn token_vector(token: u32, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e47_0000_0000_0000 ^ u64::from(token));
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        })
        .collect()
}

/// Mean of hashed token vectors plus sinusoidal position codes over the
/// first `max_tokens` tokens; zero for empty input.
pub fn encode_text(tokens: &[u32], dim: usize, max_tokens: usize) -> Vec<f64> {
    let used = &tokens[..tokens.len().min(max_tokens)];
    let mut out = vec![0.0; dim];
    if used.is_empty() {
        return out;
    }
    let pe = crate::seqmodel::positional_encoding(used.len(), dim);
    for (pos, &tok) in used.iter().enumerate() {
        for (i, v) in token_vector(tok, dim).into_iter().enumerate() {
            out[i] += v + 0.1 * pe.data()[pos * dim + i];
        }
    }
    let n = used.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Frame-aligned and segment-aligned descriptors of one audio stream.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures {
    /// VQ_A encoder latents per segment, `[segments, latent_width]`.
    pub vq_latents: Tensor,
    /// Onset strength per gesture frame, `ceil(duration·15)` values.
    pub onset: Vec<f64>,
    /// Log band energies per segment, `[segments, bands]`.
    pub filterbank: Tensor,
}

impl AudioFeatures {
    pub fn segments(&self) -> usize {
        self.vq_latents.shape()[0]
    }
}

fn check_stream(samples: &[f64], sample_rate: usize, op: &'static str) -> Result<()> {
    if sample_rate != SAMPLE_RATE {
        return Err(Error::domain(
            op,
            format!("sample rate {sample_rate} Hz, expected {SAMPLE_RATE} Hz"),
        ));
    }
    if samples.is_empty() {
        return Err(Error::domain(op, "empty audio stream"));
    }
    Ok(())
}

/// Audio cut into zero-padded 0.25 s segments, `[segments, 4000]`.
pub fn audio_segments(samples: &[f64]) -> Tensor {
    let n = samples.len().div_ceil(SEGMENT_SAMPLES).max(1);
    let mut data = samples.to_vec();
    data.resize(n * SEGMENT_SAMPLES, 0.0);
    Tensor::new(vec![n, SEGMENT_SAMPLES], data).expect("positive extents")
}

fn magnitudes(fft: &Arc<dyn Fft<f64>>, frame: &[f64], window: Option<&[f64]>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = frame
        .iter()
        .enumerate()
        .map(|(i, &v)| Complex::new(v * window.map_or(1.0, |w| w[i]), 0.0))
        .collect();
    fft.process(&mut buf);
    buf[..frame.len() / 2 + 1]
        .iter()
        .map(|c| c.norm())
        .collect()
}

/// Half-wave rectified spectral flux at the gesture frame rate.
///
/// Frame `k` analyses a Hann-windowed 1024-sample block starting at
/// `round(k·16000/15)`; frame 0 is compared against silence.
pub fn onset_strength(samples: &[f64], sample_rate: usize) -> Result<Vec<f64>> {
    check_stream(samples, sample_rate, "onset_features")?;
    let frames = (samples.len() as f64 * FRAME_RATE / sample_rate as f64).ceil() as usize;
    let hop = sample_rate as f64 / FRAME_RATE;
    let fft = FftPlanner::new().plan_fft_forward(ONSET_FFT);
    let hann: Vec<f64> = (0..ONSET_FFT)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / ONSET_FFT as f64).cos())
        .collect();
    let mut prev = vec![0.0; ONSET_FFT / 2 + 1];
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let start = (k as f64 * hop).round() as usize;
        let mut block = vec![0.0; ONSET_FFT];
        for (i, b) in block.iter_mut().enumerate() {
            *b = samples.get(start + i).copied().unwrap_or(0.0);
        }
        let mag = magnitudes(&fft, &block, Some(&hann));
        let flux: f64 = mag.iter().zip(&prev).map(|(m, p)| (m - p).max(0.0)).sum();
        out.push(flux / ONSET_FFT as f64);
        prev = mag;
    }
    Ok(out)
}

/// `log1p` of the mean spectral energy in equal-width bands, per segment.
pub fn filterbank(samples: &[f64], sample_rate: usize, bands: usize) -> Result<Tensor> {
    check_stream(samples, sample_rate, "filterbank")?;
    if bands == 0 {
        return Err(Error::domain("filterbank", "zero bands"));
    }
    let segs = audio_segments(samples);
    let fft = FftPlanner::new().plan_fft_forward(SEGMENT_SAMPLES);
    let mut data = Vec::with_capacity(segs.shape()[0] * bands);
    for seg in segs.data().chunks_exact(SEGMENT_SAMPLES) {
        let mag = magnitudes(&fft, seg, None);
        let bins = mag.len() - 1;
        for b in 0..bands {
            let (lo, hi) = (1 + b * bins / bands, 1 + (b + 1) * bins / bands);
            let e: f64 = mag[lo..hi].iter().map(|m| m * m).sum::<f64>()
                / ((hi - lo).max(1) * SEGMENT_SAMPLES) as f64;
            data.push(e.ln_1p());
        }
    }
    Tensor::new(vec![segs.shape()[0], bands], data)
}

/// VQ_A latents, onset strengths and filterbank context for one stream.
pub fn encode_audio(
    vq_a: &VqVae2,
    samples: &[f64],
    sample_rate: usize,
    bands: usize,
) -> Result<AudioFeatures> {
    check_stream(samples, sample_rate, "encode_audio")?;
    if vq_a.input_dim != SEGMENT_SAMPLES {
        return Err(Error::shape(
            "encode_audio",
            format!("VQ_A reads {} samples per window", vq_a.input_dim),
        ));
    }
    let enc = vq_a.encode(&audio_segments(samples))?;
    let n = enc.z_e_top.shape()[0];
    let (wt, wb) = (enc.z_e_top.numel() / n, enc.z_e_bottom.numel() / n);
    let mut lat = Vec::with_capacity(n * (wt + wb));
    for s in 0..n {
        lat.extend_from_slice(&enc.z_e_top.data()[s * wt..(s + 1) * wt]);
        lat.extend_from_slice(&enc.z_e_bottom.data()[s * wb..(s + 1) * wb]);
    }
    Ok(AudioFeatures {
        vq_latents: Tensor::new(vec![n, wt + wb], lat)?,
        onset: onset_strength(samples, sample_rate)?,
        filterbank: filterbank(samples, sample_rate, bands)?,
    })
}

/// Segment feeding gesture position `t` (nearest-neighbour resampling to 15 fps).
pub fn segment_for_frame(t: usize, segments: usize) -> usize {
    ((t as f64 / FRAME_RATE / 0.25).floor() as usize).min(segments.saturating_sub(1))
}

/// Rows of a `[segments, d]` table repeated onto `positions` gesture frames.
pub fn resample_segments(table: &Tensor, positions: usize) -> Tensor {
    let (n, d) = (table.shape()[0], table.shape()[1]);
    let mut data = Vec::with_capacity(positions * d);
    for t in 0..positions {
        let s = segment_for_frame(t, n);
        data.extend_from_slice(&table.data()[s * d..(s + 1) * d]);
    }
    Tensor::new(vec![positions, d], data).expect("positive extents")
}

/// Trainable map from scalar onset strength to an onset embedding.
#[derive(Clone, Debug)]
pub struct OnsetEncoder {
    pub mlp: Mlp,
}

impl OnsetEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &InputConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        OnsetEncoder {
            mlp: Mlp::new(
                store,
                name,
                &[1, cfg.onset_hidden, cfg.onset_dim],
                Activation::Tanh,
                rng,
            ),
        }
    }

    /// `[.., positions, 1]` → `[.., positions, onset_dim]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, onset: Var<'t>) -> Result<Var<'t>> {
        self.mlp.forward(p, onset)
    }
}

/// Speaker embeddings, their Gaussian style space and the decision network.
#[derive(Clone, Debug)]
pub struct SpeakerSpace {
    pub embeddings: ParamId,
    pub speakers: usize,
    pub embed_dim: usize,
    pub style_dim: usize,
    pub style: Mlp,
    pub decision: Mlp,
}

/// Reparameterized style sample with its distribution parameters.
#[derive(Clone, Copy, Debug)]
pub struct StyleSample<'t> {
    pub z: Var<'t>,
    pub mu: Var<'t>,
    pub logvar: Var<'t>,
}

/// Decision-network output.
#[derive(Clone, Debug)]
pub struct SpeakerDecision<'t> {
    pub probs: Var<'t>,
    pub chosen: Vec<usize>,
    pub embedding: Var<'t>,
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl SpeakerSpace {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &InputConfig,
        features: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (e, s) = (cfg.speaker_embed_dim, cfg.style_dim);
        SpeakerSpace {
            embeddings: store.add(
                format!("{name}.embeddings"),
                uniform(rng, &[cfg.speakers, e], 1.0),
            ),
            speakers: cfg.speakers,
            embed_dim: e,
            style_dim: s,
            style: Mlp::new(
                store,
                &format!("{name}.style"),
                &[e, 2 * e, 2 * s],
                Activation::Tanh,
                rng,
            ),
            decision: Mlp::new(
                store,
                &format!("{name}.decision"),
                &[features, 2 * e, cfg.speakers],
                Activation::Tanh,
                rng,
            ),
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.speakers) {
            Some(bad) => Err(Error::domain(
                "speaker",
                format!("unknown speaker id {bad} (known: {})", self.speakers),
            )),
            None => Ok(()),
        }
    }

    /// Embedding rows `[ids.len(), embed_dim]`.
    pub fn embed<'t>(&self, p: &Bound<'t>, ids: &[usize]) -> Result<Var<'t>> {
        self.check_ids(ids)?;
        p.param(self.embeddings).gather_rows(ids)
    }

    /// `(mu, logvar)`, each `[ids.len(), style_dim]`.
    pub fn distribution<'t>(&self, p: &Bound<'t>, ids: &[usize]) -> Result<(Var<'t>, Var<'t>)> {
        let out = self.style.forward(p, self.embed(p, ids)?)?;
        Ok((
            out.slice(1, 0, self.style_dim)?,
            out.slice(1, self.style_dim, self.style_dim)?,
        ))
    }

    /// `mu + exp(½·logvar) ⊙ noise`; `noise` is `[ids.len(), style_dim]`.
    pub fn sample<'t>(
        &self,
        p: &Bound<'t>,
        ids: &[usize],
        noise: &Tensor,
    ) -> Result<StyleSample<'t>> {
        let (mu, logvar) = self.distribution(p, ids)?;
        if noise.shape() != [ids.len(), self.style_dim] {
            return Err(Error::shape(
                "speaker_sample",
                format!("noise {:?}", noise.shape()),
            ));
        }
        let z = speaker_sample(mu, logvar, noise)?;
        Ok(StyleSample { z, mu, logvar })
    }

    /// Decision logits for pooled features `[B, features]`.
    pub fn decision_logits<'t>(&self, p: &Bound<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let s = features.shape();
        if s.len() != 2 || s[1] != self.decision.in_dim() {
            return Err(Error::shape(
                "speaker_decision",
                format!("expected [batch, {}], got {s:?}", self.decision.in_dim()),
            ));
        }
        self.decision.forward(p, features)
    }

    /// Softmax over speakers and the embedding of the most likely one.
    pub fn decide<'t>(&self, p: &Bound<'t>, features: Var<'t>) -> Result<SpeakerDecision<'t>> {
        let probs = self.decision_logits(p, features)?.softmax()?;
        let chosen: Vec<usize> = probs
            .value()
            .data()
            .chunks_exact(self.speakers)
            .map(argmax)
            .collect();
        let embedding = self.embed(p, &chosen)?;
        Ok(SpeakerDecision {
            probs,
            chosen,
            embedding,
        })
    }

    /// Mean cross-entropy of the decision network against known labels.
    pub fn decision_cross_entropy<'t>(
        &self,
        p: &Bound<'t>,
        features: Var<'t>,
        labels: &[usize],
    ) -> Result<Var<'t>> {
        self.check_ids(labels)?;
        let logp = self.decision_logits(p, features)?.log_softmax()?;
        let mut onehot = vec![0.0; labels.len() * self.speakers];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * self.speakers + l] = 1.0;
        }
        let mask = std::rc::Rc::new(Tensor::new(vec![labels.len(), self.speakers], onehot)?);
        Ok(logp
            .mul_const(mask)?
            .sum()
            .scale(-1.0 / labels.len() as f64))
    }
}

/// `mu + exp(½·logvar) ⊙ noise`.
pub fn speaker_sample<'t>(mu: Var<'t>, logvar: Var<'t>, noise: &Tensor) -> Result<Var<'t>> {
    if mu.shape() != logvar.shape() || mu.shape() != noise.shape() {
        return Err(Error::shape(
            "speaker_sample",
            format!(
                "mu {:?}, logvar {:?}, noise {:?}",
                mu.shape(),
                logvar.shape(),
                noise.shape()
            ),
        ));
    }
    let sigma = logvar.scale(0.5).exp();
    mu.add(sigma.mul_const(std::rc::Rc::new(noise.clone()))?)
}

/// Named slice of the fused input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: &'static str,
    pub start: usize,
    pub len: usize,
}

/// Where each part sits inside the fused feature axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputLayout {
    pub segments: Vec<Segment>,
}

impl InputLayout {
    pub fn width(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// Parts of the fused input for a batch, each already on the tape.
///
/// Frame-aligned parts are `[B, positions, d]`; clip-level parts are `[B, d]`.
#[derive(Clone, Debug)]
pub struct InputParts<'t> {
    pub gesture: Var<'t>,
    pub text: Var<'t>,
    pub audio_latents: Var<'t>,
    pub onset: Var<'t>,
    pub filterbank: Var<'t>,
    pub style: Var<'t>,
}

/// Per-position concatenation of frame-aligned parts with broadcast
/// clip-level parts, `[B, positions, fused]`.
pub fn assemble_input<'t>(parts: &InputParts<'t>) -> Result<(Var<'t>, InputLayout)> {
    let frame_parts = [
        ("gesture", parts.gesture),
        ("audio_latents", parts.audio_latents),
        ("onset", parts.onset),
        ("filterbank", parts.filterbank),
    ];
    let s0 = parts.gesture.shape();
    if s0.len() != 3 {
        return Err(Error::shape(
            "assemble_input",
            format!("gesture part {s0:?} is not [batch, positions, d]"),
        ));
    }
    let (b, l) = (s0[0], s0[1]);
    for (name, v) in frame_parts {
        let s = v.shape();
        if s.len() != 3 || s[0] != b || s[1] != l {
            return Err(Error::shape(
                "assemble_input",
                format!("{name} part {s:?} does not cover [{b}, {l}, _]"),
            ));
        }
    }
    let broadcast = |name: &str, v: Var<'t>| -> Result<Var<'t>> {
        let s = v.shape();
        if s.len() != 2 || s[0] != b {
            return Err(Error::shape(
                "assemble_input",
                format!("{name} part {s:?} is not [{b}, d]"),
            ));
        }
        v.reshape(&[b, 1, s[1]])?.broadcast_to(&[b, l, s[1]])
    };
    let ordered = [
        ("gesture", parts.gesture),
        ("text", broadcast("text", parts.text)?),
        ("audio_latents", parts.audio_latents),
        ("onset", parts.onset),
        ("filterbank", parts.filterbank),
        ("style", broadcast("style", parts.style)?),
    ];
    let mut segments = Vec::new();
    let mut start = 0;
    for (name, v) in &ordered {
        let len = v.shape()[2];
        segments.push(Segment { name, start, len });
        start += len;
    }
    let fused = Var::concat(&ordered.iter().map(|(_, v)| *v).collect::<Vec<_>>(), 2)?;
    Ok((fused, InputLayout { segments }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::VqConfig;
    use crate::numerics::Tape;

    #[test]
    fn text_rules() {
        assert!(encode_text(&[], 16, 300).iter().all(|&v| v == 0.0));
        let toks: Vec<u32> = (0..301).map(|i| i % 50).collect();
        assert_eq!(
            encode_text(&toks, 16, 300),
            encode_text(&toks[..300], 16, 300)
        );
        assert_eq!(encode_text(&[3, 4], 16, 300), encode_text(&[3, 4], 16, 300));
        assert_ne!(encode_text(&[3, 4], 16, 300), encode_text(&[4, 3], 16, 300));
    }

    #[test]
    fn segment_counts() {
        assert_eq!(
            audio_segments(&vec![0.1; 32_000]).shape(),
            &[8, SEGMENT_SAMPLES]
        );
        assert_eq!(
            audio_segments(&vec![0.1; 32_001]).shape(),
            &[9, SEGMENT_SAMPLES]
        );
    }

    #[test]
    fn silence_has_no_onsets() {
        let o = onset_strength(&vec![0.0; 32_000], SAMPLE_RATE).unwrap();
        assert_eq!(o.len(), 30);
        assert!(o.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn onset_rejects_bad_streams() {
        assert!(onset_strength(&[], SAMPLE_RATE).is_err());
        assert!(onset_strength(&[0.0; 100], 44_100).is_err());
    }

    #[test]
    fn steady_sine_flux_vanishes_after_first_frame() {
        let s: Vec<f64> = (0..32_000)
            .map(|i| (2.0 * std::f64::consts::PI * 437.5 * i as f64 / 16_000.0).sin())
            .collect();
        let o = onset_strength(&s, SAMPLE_RATE).unwrap();
        assert!(o[0] > 0.0);
        assert!(o[1..].iter().all(|&v| v < 1e-2 * o[0]), "{o:?}");
    }

    #[test]
    fn resampling_maps_frames_to_segments() {
        assert_eq!(segment_for_frame(0, 8), 0);
        assert_eq!(segment_for_frame(3, 8), 0);
        assert_eq!(segment_for_frame(4, 8), 1);
        assert_eq!(segment_for_frame(29, 8), 7);
        assert_eq!(segment_for_frame(40, 8), 7);
    }

    #[test]
    fn uniform_logits_pick_speaker_zero() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn sample_identities() {
        let t = Tape::new();
        let mu = t.constant(Tensor::vector(&[0.5, -1.0]).reshaped(&[1, 2]).unwrap());
        let lv = t.constant(Tensor::zeros(&[1, 2]));
        let z0 = speaker_sample(mu, lv, &Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(z0.value().data(), &[0.5, -1.0]);
        let n = Tensor::matrix(&[&[0.25, 2.0]]).unwrap();
        let z1 = speaker_sample(mu, lv, &n).unwrap();
        assert_eq!(z1.value().data(), &[0.75, 1.0]);
    }

    #[test]
    fn unfrozen_vq_is_a_contract_error() {
        let vq = VqVae2::new(
            &VqConfig {
                codebook_size: 4,
                ..VqConfig::gesture()
            },
            12,
            0,
        );
        assert!(matches!(
            gesture_codes(&vq, &Tensor::zeros(&[4, 3])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fused_width_and_slices() {
        let t = Tape::new();
        let c = |shape: &[usize], v: f64| t.constant(Tensor::full(shape, v));
        let parts = InputParts {
            gesture: c(&[2, 34, 24], 1.0),
            text: c(&[2, 16], 2.0),
            audio_latents: c(&[2, 34, 12], 3.0),
            onset: c(&[2, 34, 4], 4.0),
            filterbank: c(&[2, 34, 8], 5.0),
            style: c(&[2, 8], 6.0),
        };
        let (fused, layout) = assemble_input(&parts).unwrap();
        assert_eq!(fused.shape(), vec![2, 34, 72]);
        assert_eq!(layout.width(), 72);
        for (k, seg) in layout.segments.iter().enumerate() {
            let part = fused.slice(2, seg.start, seg.len).unwrap();
            let want = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0][k];
            assert!(
                part.value().data().iter().all(|&v| v == want),
                "{}",
                seg.name
            );
        }
    }
}

//! The full generator: input encoders, GRU-Transformer, speaker decision
//! network and temporal aligner.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aligner::TemporalAligner;
use crate::config::ModelConfig;
use crate::data::{GestureClip, Skeleton, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::modalities::{
    assemble_input, embed_codes, encode_audio, encode_text, gesture_codes, resample_segments,
    CodeEmbedding, InputLayout, InputParts, OnsetEncoder, SpeakerSpace, StyleSample,
};
use crate::numerics::{Bound, ParamStore, Tensor, Var};
use crate::quantize::VqVae2;
use crate::seqmodel::GruTransformer;

/// Everything the generator reads for one training sequence, computed once
/// with the frozen encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatures {
    pub clip_id: String,
    pub speaker: usize,
    /// VQ_G codes of the seed window, top level first.
    pub codes: Vec<usize>,
    pub text: Vec<f64>,
    /// `[positions, audio latent width]`.
    pub audio_latents: Tensor,
    /// `[positions, 1]`.
    pub onset: Tensor,
    /// `[positions, bands]`.
    pub filterbank: Tensor,
    /// Seed frames `[N, frame_dim]`.
    pub seed: Tensor,
    /// Frames to generate `[M, frame_dim]`.
    pub target: Tensor,
}

/// Precomputes [`ClipFeatures`] from the first `N + M` frames of `clip`.
pub fn clip_features(
    clip: &GestureClip,
    cfg: &ModelConfig,
    frame_dim: usize,
    vq_g: &VqVae2,
    vq_a: &VqVae2,
) -> Result<ClipFeatures> {
    let (n, m) = (cfg.inputs.seed_frames, cfg.inputs.gen_frames);
    let positions = n + m;
    if clip.n_frames < positions {
        return Err(Error::domain(
            "clip_features",
            format!(
                "clip {} has {} frames, {positions} needed",
                clip.id, clip.n_frames
            ),
        ));
    }
    let frames = Tensor::new(vec![clip.n_frames, frame_dim], clip.frames.clone())?;
    let seed = Tensor::new(vec![n, frame_dim], frames.data()[..n * frame_dim].to_vec())?;
    let target = Tensor::new(
        vec![m, frame_dim],
        frames.data()[n * frame_dim..positions * frame_dim].to_vec(),
    )?;
    let codes = gesture_codes(vq_g, &seed)?.concat();
    let audio = encode_audio(vq_a, &clip.audio, SAMPLE_RATE, cfg.inputs.filterbank_bands)?;
    let mut onset = audio.onset.clone();
    onset.resize(positions, 0.0);
    onset.truncate(positions);
    Ok(ClipFeatures {
        clip_id: clip.id.clone(),
        speaker: clip.speaker,
        codes,
        text: encode_text(&clip.tokens, cfg.inputs.text_dim, cfg.inputs.max_tokens),
        audio_latents: resample_segments(&audio.vq_latents, positions),
        onset: Tensor::new(vec![positions, 1], onset)?,
        filterbank: resample_segments(&audio.filterbank, positions),
        seed,
        target,
    })
}

/// Stacked [`ClipFeatures`] of a minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub codes: Vec<Vec<usize>>,
    pub speakers: Vec<usize>,
    pub text: Tensor,
    pub audio_latents: Tensor,
    pub onset: Tensor,
    pub filterbank: Tensor,
    pub seed: Tensor,
    pub target: Tensor,
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("batch", "empty batch"))?;
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * parts.len());
    for t in parts {
        if t.shape() != first.shape() {
            return Err(Error::shape(
                "batch",
                format!("{:?} vs {:?}", t.shape(), first.shape()),
            ));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

fn concat0(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

impl Batch {
    pub fn new(items: &[&ClipFeatures]) -> Result<Self> {
        let text: Vec<Tensor> = items.iter().map(|c| Tensor::vector(&c.text)).collect();
        Ok(Batch {
            codes: items.iter().map(|c| c.codes.clone()).collect(),
            speakers: items.iter().map(|c| c.speaker).collect(),
            text: stack(&text.iter().collect::<Vec<_>>())?,
            audio_latents: stack(&items.iter().map(|c| &c.audio_latents).collect::<Vec<_>>())?,
            onset: stack(&items.iter().map(|c| &c.onset).collect::<Vec<_>>())?,
            filterbank: stack(&items.iter().map(|c| &c.filterbank).collect::<Vec<_>>())?,
            seed: stack(&items.iter().map(|c| &c.seed).collect::<Vec<_>>())?,
            target: stack(&items.iter().map(|c| &c.target).collect::<Vec<_>>())?,
        })
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    /// The batch followed by itself with `other_speakers` as identities.
    pub fn doubled(&self, other_speakers: &[usize]) -> Result<Batch> {
        if other_speakers.len() != self.len() {
            return Err(Error::shape(
                "batch",
                "speaker list length differs from batch size",
            ));
        }
        let mut codes = self.codes.clone();
        codes.extend(self.codes.iter().cloned());
        let mut speakers = self.speakers.clone();
        speakers.extend_from_slice(other_speakers);
        Ok(Batch {
            codes,
            speakers,
            text: concat0(&self.text, &self.text)?,
            audio_latents: concat0(&self.audio_latents, &self.audio_latents)?,
            onset: concat0(&self.onset, &self.onset)?,
            filterbank: concat0(&self.filterbank, &self.filterbank)?,
            seed: concat0(&self.seed, &self.seed)?,
            target: concat0(&self.target, &self.target)?,
        })
    }

    /// Target frames flattened per sample, `[B, M·frame_dim]`.
    pub fn target_flat(&self) -> Tensor {
        let b = self.len();
        self.target
            .reshaped(&[b, self.target.numel() / b])
            .expect("same element count")
    }
}

/// Tape values produced by one generator pass.
#[derive(Clone, Debug)]
pub struct GenOutput<'t> {
    /// `[B, M, frame_dim]`, relative coordinates.
    pub frames: Var<'t>,
    /// Fused input `T`, `[B, N+M, fused]`.
    pub input: Var<'t>,
    pub layout: InputLayout,
    /// GRU-Transformer output, `[B, N+M, fused]`.
    pub sequence: Var<'t>,
    /// Speaker decision softmax, `[B, speakers]`.
    pub speaker_probs: Var<'t>,
    pub chosen_speakers: Vec<usize>,
    pub style: StyleSample<'t>,
    /// VQ_G indices chosen by the aligner, `(top, bottom)`.
    pub codes: Option<(Vec<usize>, Vec<usize>)>,
}

/// Generator weights and structure. Encoders outside it (VQ_G, VQ_A) stay
/// frozen and are passed in.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: ModelConfig,
    pub skeleton: Skeleton,
    pub params: ParamStore,
    pub codes: CodeEmbedding,
    pub onset: OnsetEncoder,
    pub speakers: SpeakerSpace,
    pub sequence: GruTransformer,
    pub aligner: TemporalAligner,
    pub fused_dim: usize,
    pub w_dim: usize,
}

impl Generator {
    pub fn new(config: &ModelConfig, skeleton: &Skeleton, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let i = &config.inputs;
        let vg = &config.vq_gesture;
        let codes_per_window = vg.top_positions() + vg.bottom_positions;
        let audio_dim = config.vq_audio.latent_width() + i.onset_dim + i.filterbank_bands;
        let fused_dim = codes_per_window * i.code_embed_dim + i.text_dim + audio_dim + i.style_dim;
        let w_dim = fused_dim + i.speaker_embed_dim + i.text_dim + audio_dim;
        let codes = CodeEmbedding::new(
            &mut params,
            "codes",
            vg.codebook_size,
            i.code_embed_dim,
            &mut rng,
        );
        let onset = OnsetEncoder::new(&mut params, "onset", i, &mut rng);
        let speakers = SpeakerSpace::new(&mut params, "speaker", i, fused_dim, &mut rng);
        let sequence = GruTransformer::build(&mut params, "gt", fused_dim, &config.seq, &mut rng);
        let aligner = TemporalAligner::new(
            &mut params,
            "aligner",
            &config.aligner,
            w_dim,
            skeleton.frame_dim(),
            vg.latent_width(),
            &mut rng,
        );
        Ok(Generator {
            config: config.clone(),
            skeleton: skeleton.clone(),
            params,
            codes,
            onset,
            speakers,
            sequence,
            aligner,
            fused_dim,
            w_dim,
        })
    }

    pub fn frame_dim(&self) -> usize {
        self.skeleton.frame_dim()
    }

    /// One pass for `batch`; `noise` is `[B, style_dim]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        vq_g: &VqVae2,
        p_vq: &Bound<'t>,
        batch: &Batch,
        noise: &Tensor,
    ) -> Result<GenOutput<'t>> {
        let tape = p.tape();
        let (n, m) = (
            self.config.inputs.seed_frames,
            self.config.inputs.gen_frames,
        );
        let positions = n + m;
        let b = batch.len();
        let per_window = batch.codes.first().map_or(0, Vec::len);
        let emb = embed_codes(p, &self.codes, &batch.codes)?;
        let gdim = per_window * self.codes.dim;
        let gesture = emb
            .reshape(&[b, 1, gdim])?
            .broadcast_to(&[b, n, gdim])?
            .pad(1, 0, positions)?;
        let text = tape.constant(batch.text.clone());
        let audio_latents = tape.constant(batch.audio_latents.clone());
        let onset = self.onset.forward(p, tape.constant(batch.onset.clone()))?;
        let filterbank = tape.constant(batch.filterbank.clone());
        let style = self.speakers.sample(p, &batch.speakers, noise)?;
        let parts = InputParts {
            gesture,
            text,
            audio_latents,
            onset,
            filterbank,
            style: style.z,
        };
        let (input, layout) = assemble_input(&parts)?;
        let sequence = self.sequence.forward(p, input)?;
        let decision = self.speakers.decide(p, sequence.mean_axis(1, false)?)?;
        let e = self.speakers.embed_dim;
        let spd = decision
            .embedding
            .reshape(&[b, 1, e])?
            .broadcast_to(&[b, positions, e])?;
        let td = batch.text.shape()[1];
        let text_b = text
            .reshape(&[b, 1, td])?
            .broadcast_to(&[b, positions, td])?;
        let w = Var::concat(
            &[sequence, spd, text_b, audio_latents, onset, filterbank],
            2,
        )?;
        let w_gen = w.slice(1, n, m)?;
        let out = self.aligner.synthesize_sequence(p, vq_g, p_vq, w_gen)?;
        Ok(GenOutput {
            frames: out.frames,
            input,
            layout,
            sequence,
            speaker_probs: decision.probs,
            chosen_speakers: decision.chosen,
            style,
            codes: out.codes,
        })
    }
}

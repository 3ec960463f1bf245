//! Autoregressive window fusion, latent reconstruction through VQ_G and
//! overlap blending of decoded windows.

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;

use crate::config::AlignerConfig;
use crate::error::{Error, Result};
use crate::numerics::{Activation, Bound, Mlp, ParamStore, Tensor, Var};
use crate::quantize::VqVae2;

/// Fused inputs kept in the sliding window, the current one included.
pub const HISTORY: usize = 4;

/// Previous fusion vector plus the last four inputs.
#[derive(Clone, Debug)]
pub struct TemporalState<'t> {
    pub f_prev: Var<'t>,
    pub window: VecDeque<Var<'t>>,
}

impl<'t> TemporalState<'t> {
    /// Zero fusion vector and zero pre-history for a batch.
    pub fn zeros(p: &Bound<'t>, batch: usize, w_dim: usize, fc_dim: usize) -> Self {
        let tape = p.tape();
        let window = (0..HISTORY)
            .map(|_| tape.constant(Tensor::zeros(&[batch, w_dim])))
            .collect();
        TemporalState {
            f_prev: tape.constant(Tensor::zeros(&[batch, fc_dim])),
            window,
        }
    }
}

/// Trainable parts of the aligner.
#[derive(Clone, Debug)]
pub struct TemporalAligner {
    pub config: AlignerConfig,
    pub w_dim: usize,
    pub frame_dim: usize,
    pub latent_width: usize,
    pub fuse: Mlp,
    pub head: Mlp,
    pub p_mlp: Mlp,
    /// Stand-in used when the aligner is disabled.
    pub readout: Option<Mlp>,
}

/// Frames plus the intermediate windows they were blended from.
#[derive(Clone, Debug)]
pub struct AlignerOutput<'t> {
    /// `[B, M, frame_dim]`.
    pub frames: Var<'t>,
    /// Decoded windows `[B, M, window, frame_dim]` when VQ_G decoding is active.
    pub windows: Option<Var<'t>>,
    /// `[B, M, frame_dim]` correction branch when the aligner is active.
    pub p_star: Option<Var<'t>>,
    /// VQ_G codebook indices `(top, bottom)` selected for the reconstructed latents.
    pub codes: Option<(Vec<usize>, Vec<usize>)>,
}

impl TemporalAligner {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &AlignerConfig,
        w_dim: usize,
        frame_dim: usize,
        latent_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (fc, h) = (cfg.fc_dim, cfg.hidden);
        let fuse = Mlp::new(
            store,
            &format!("{name}.fuse"),
            &[fc + HISTORY * w_dim, h, fc],
            Activation::Tanh,
            rng,
        );
        let head = Mlp::new(
            store,
            &format!("{name}.head"),
            &[fc, h, latent_width],
            Activation::Tanh,
            rng,
        );
        let p_mlp = Mlp::new(
            store,
            &format!("{name}.p"),
            &[fc, h, frame_dim],
            Activation::Tanh,
            rng,
        );
        let readout = (!cfg.use_aligner).then(|| {
            Mlp::new(
                store,
                &format!("{name}.readout"),
                &[w_dim, h, frame_dim],
                Activation::Tanh,
                rng,
            )
        });
        TemporalAligner {
            config: cfg.clone(),
            w_dim,
            frame_dim,
            latent_width,
            fuse,
            head,
            p_mlp,
            readout,
        }
    }

    /// `f_c(W_t) = tanh(MLP(f_c(W_{t−1}) ⧺ W_{t−3} ⧺ W_{t−2} ⧺ W_{t−1} ⧺ W_t))`;
    /// advances `state`.
    pub fn temporal_fuse<'t>(
        &self,
        p: &Bound<'t>,
        state: &mut TemporalState<'t>,
        w_t: Var<'t>,
    ) -> Result<Var<'t>> {
        let s = w_t.shape();
        if s.len() != 2 || s[1] != self.w_dim {
            return Err(Error::shape(
                "temporal_fuse",
                format!("expected [batch, {}], got {s:?}", self.w_dim),
            ));
        }
        state.window.pop_front();
        state.window.push_back(w_t);
        let mut parts = vec![state.f_prev];
        parts.extend(state.window.iter().copied());
        let f = self.fuse.forward(p, Var::concat(&parts, 1)?)?.tanh();
        state.f_prev = f;
        Ok(f)
    }

    /// `E*_t` as `[B, latent_width]`.
    pub fn reconstruct_latents<'t>(&self, p: &Bound<'t>, f_c: Var<'t>) -> Result<Var<'t>> {
        self.head.forward(p, f_c)
    }

    /// `p*_t`, `[B, frame_dim]`.
    pub fn correction<'t>(&self, p: &Bound<'t>, f_c: Var<'t>) -> Result<Var<'t>> {
        self.p_mlp.forward(p, f_c)
    }

    /// Runs the aligner over `w_seq` (`[B, M, w_dim]`).
    pub fn synthesize_sequence<'t>(
        &self,
        p: &Bound<'t>,
        vq_g: &VqVae2,
        p_vq: &Bound<'t>,
        w_seq: Var<'t>,
    ) -> Result<AlignerOutput<'t>> {
        let s = w_seq.shape();
        if s.len() != 3 || s[2] != self.w_dim || s[1] == 0 {
            return Err(Error::shape(
                "synthesize_sequence",
                format!("expected [batch, M, {}], got {s:?}", self.w_dim),
            ));
        }
        let (b, m) = (s[0], s[1]);
        if let Some(readout) = &self.readout {
            return Ok(AlignerOutput {
                frames: readout.forward(p, w_seq)?,
                windows: None,
                p_star: None,
                codes: None,
            });
        }
        let mut state = TemporalState::zeros(p, b, self.w_dim, self.config.fc_dim);
        let mut fcs = Vec::with_capacity(m);
        for t in 0..m {
            fcs.push(self.temporal_fuse(p, &mut state, w_seq.select(1, t)?)?);
        }
        let fc = Var::stack(&fcs, 1)?;
        let p_star = self.correction(p, fc)?;
        if !self.config.use_vq_g {
            return Ok(AlignerOutput {
                frames: p_star,
                windows: None,
                p_star: Some(p_star),
                codes: None,
            });
        }
        let latents = self
            .reconstruct_latents(p, fc)?
            .reshape(&[b * m, self.latent_width])?;
        let (windows, codes) = decode_windows(vq_g, p_vq, latents, self.config.quantize_latents)?;
        let window = vq_g.config.window;
        let windows = windows.reshape(&[b, m, window, self.frame_dim])?;
        let g_star = fuse_window_sequence(windows)?;
        let frames = blend_correction(g_star, p_star)?;
        Ok(AlignerOutput {
            frames,
            windows: Some(windows),
            p_star: Some(p_star),
            codes,
        })
    }
}

/// Decodes `[n, latent_width]` latents (top positions first) through the
/// frozen VQ_G; optionally snaps them to its codebooks first and reports
/// the selected indices.
#[allow(clippy::type_complexity)]
pub fn decode_windows<'t>(
    vq_g: &VqVae2,
    p_vq: &Bound<'t>,
    latents: Var<'t>,
    quantize: bool,
) -> Result<(Var<'t>, Option<(Vec<usize>, Vec<usize>)>)> {
    if !vq_g.is_frozen() {
        return Err(Error::Contract(
            "window decoding requires a frozen VQ_G".into(),
        ));
    }
    let (pt, pb, d) = (
        vq_g.config.top_positions(),
        vq_g.config.bottom_positions,
        vq_g.config.latent_dim,
    );
    let s = latents.shape();
    if s.len() != 2 || s[1] != (pt + pb) * d {
        return Err(Error::shape(
            "reconstruct_latents",
            format!("expected [n, {}], got {s:?}", (pt + pb) * d),
        ));
    }
    let n = s[0];
    let mut top = latents.slice(1, 0, pt * d)?.reshape(&[n, pt, d])?;
    let mut bottom = latents.slice(1, pt * d, pb * d)?.reshape(&[n, pb, d])?;
    let mut codes = None;
    if quantize {
        let (i_top, q_top, i_bottom, q_bottom) = vq_g.quantize_latents(p_vq, top, bottom)?;
        top = top.straight_through(q_top)?;
        bottom = bottom.straight_through(q_bottom)?;
        codes = Some((i_top, i_bottom));
    }
    Ok((vq_g.decode(p_vq, top, bottom)?, codes))
}

/// Mean of the available terms among `vg_prev[2]`, `vg_curr[1]`, `vg_next[0]`,
/// computed as the current term plus the mean deviation of the others.
/// Windows are `[B, window, frame_dim]`.
pub fn fuse_frames<'t>(
    vg_prev: Option<Var<'t>>,
    vg_curr: Option<Var<'t>>,
    vg_next: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let pick = |w: Option<Var<'t>>, k: usize| -> Result<Option<Var<'t>>> {
        let Some(w) = w else { return Ok(None) };
        let s = w.shape();
        if s.len() != 3 || s[1] <= k {
            return Err(Error::shape(
                "fuse_frames",
                format!("window {s:?} lacks frame {k}"),
            ));
        }
        w.select(1, k).map(Some)
    };
    let mut terms: Vec<Var<'t>> = [pick(vg_curr, 1)?, pick(vg_prev, 2)?, pick(vg_next, 0)?]
        .into_iter()
        .flatten()
        .collect();
    if terms.is_empty() {
        return Err(Error::Contract(
            "fuse_frames needs at least one window".into(),
        ));
    }
    let anchor = terms.remove(0);
    let n = terms.len() + 1;
    let mut deviation: Option<Var<'t>> = None;
    for t in terms {
        if t.shape() != anchor.shape() {
            return Err(Error::shape(
                "fuse_frames",
                format!("{:?} vs {:?}", t.shape(), anchor.shape()),
            ));
        }
        let d = t.sub(anchor)?;
        deviation = Some(match deviation {
            Some(acc) => acc.add(d)?,
            None => d,
        });
    }
    match deviation {
        Some(d) => anchor.add(d.scale(1.0 / n as f64)),
        None => Ok(anchor),
    }
}

/// `g*_t` for every position of `[B, M, window, D]` windows at once, with
/// boundary renormalization.
pub fn fuse_window_sequence<'t>(windows: Var<'t>) -> Result<Var<'t>> {
    let s = windows.shape();
    if s.len() != 4 || s[2] < 3 {
        return Err(Error::shape(
            "fuse_frames",
            format!("expected [B, M, >=3, D], got {s:?}"),
        ));
    }
    let (m, d) = (s[1], s[3]);
    let curr = windows.select(2, 1)?;
    if m == 1 {
        return Ok(curr);
    }
    let prev = windows.slice(1, 0, m - 1)?.select(2, 2)?.pad(1, 1, m)?;
    let next = windows.slice(1, 1, m - 1)?.select(2, 0)?.pad(1, 0, m)?;
    let column = |f: &dyn Fn(usize) -> f64| -> Result<Var<'t>> {
        let data = (0..m).flat_map(|t| std::iter::repeat_n(f(t), d)).collect();
        Ok(windows.tape().constant(Tensor::new(vec![1, m, d], data)?))
    };
    let has_prev = column(&|t| f64::from(u8::from(t > 0)))?;
    let has_next = column(&|t| f64::from(u8::from(t + 1 < m)))?;
    let weight = column(&|t| 1.0 / (1 + usize::from(t > 0) + usize::from(t + 1 < m)) as f64)?;
    let deviation = prev
        .sub(curr)?
        .mul(has_prev)?
        .add(next.sub(curr)?.mul(has_next)?)?;
    curr.add(deviation.mul(weight)?)
}

/// `½·(g*_t + p*_t)`.
pub fn blend_correction<'t>(g_star: Var<'t>, p_star: Var<'t>) -> Result<Var<'t>> {
    if g_star.shape() != p_star.shape() {
        return Err(Error::shape(
            "blend_correction",
            format!("{:?} vs {:?}", g_star.shape(), p_star.shape()),
        ));
    }
    Ok(g_star.add(p_star)?.scale(0.5))
}

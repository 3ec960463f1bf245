//! Two-level vector-quantized autoencoder over fixed-length windows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::VqConfig;
use crate::error::{Error, Result};
use crate::numerics::{uniform, Activation, Bound, Mlp, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Top,
    Bottom,
}

/// Prototype vectors of one level plus how often each was selected.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub entries: ParamId,
    pub size: usize,
    pub dim: usize,
    pub level: Level,
    pub usage: Vec<u64>,
}

/// Index of the nearest row of `entries` (`C × d`) for every row of
/// `queries` (`n × d`) under squared Euclidean distance; ties go to the
/// lowest index.
pub fn nearest_indices(entries: &Tensor, queries: &Tensor) -> Result<Vec<usize>> {
    if entries.rank() != 2 || queries.rank() != 2 {
        return Err(Error::shape(
            "quantize",
            "entries and queries must be matrices",
        ));
    }
    let (c, d) = (entries.shape()[0], entries.shape()[1]);
    if queries.shape()[1] != d {
        return Err(Error::shape(
            "quantize",
            format!(
                "latent width {} does not match entry width {d}",
                queries.shape()[1]
            ),
        ));
    }
    let e = entries.data();
    Ok(queries
        .data()
        .chunks_exact(d)
        .map(|q| {
            let mut best = (f64::INFINITY, 0);
            for k in 0..c {
                let row = &e[k * d..(k + 1) * d];
                let dist: f64 = q.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, k);
                }
            }
            best.1
        })
        .collect())
}

impl Codebook {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        size: usize,
        dim: usize,
        level: Level,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let entries = store.add(format!("{name}.entries"), uniform(rng, &[size, dim], 0.5));
        Codebook {
            entries,
            size,
            dim,
            level,
            usage: vec![0; size],
        }
    }

    /// Nearest entries without touching usage counts.
    pub fn lookup<'t>(&self, p: &Bound<'t>, z_e: Var<'t>) -> Result<(Vec<usize>, Var<'t>)> {
        if self.size == 0 {
            return Err(Error::Contract("empty codebook".into()));
        }
        let flat = z_e
            .value()
            .reshaped(&[z_e.numel() / self.dim.max(1), self.dim])
            .map_err(|_| {
                Error::shape(
                    "quantize",
                    format!(
                        "latent shape {:?} does not hold {}-wide rows",
                        z_e.shape(),
                        self.dim
                    ),
                )
            })?;
        let idx = nearest_indices(p.store().get(self.entries), &flat)?;
        let z_q = p
            .param(self.entries)
            .gather_rows(&idx)?
            .reshape(&z_e.shape())?;
        Ok((idx, z_q))
    }

    /// Nearest entries; increments usage for every selected index.
    pub fn quantize<'t>(&mut self, p: &Bound<'t>, z_e: Var<'t>) -> Result<(Vec<usize>, Var<'t>)> {
        let (idx, z_q) = self.lookup(p, z_e)?;
        self.record(&idx);
        Ok((idx, z_q))
    }

    pub fn record(&mut self, idx: &[usize]) {
        for &i in idx {
            self.usage[i] += 1;
        }
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    pub fn perplexity(&self) -> Result<f64> {
        codebook_perplexity(&self.usage)
    }
}

/// `exp` of the entropy of the normalized usage distribution.
pub fn codebook_perplexity(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Contract("perplexity of an unused codebook".into()));
    }
    let n = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

/// `‖x − x̂‖² + ‖sg[z_e] − z_q‖² + α‖sg[z_q] − z_e‖²`, squared norms summed
/// per sample (leading axis) and averaged over the batch.
pub fn vq_loss<'t>(
    x: Var<'t>,
    x_hat: Var<'t>,
    z_e: Var<'t>,
    z_q: Var<'t>,
    alpha: f64,
) -> Result<Var<'t>> {
    Ok(vq_loss_terms(x, x_hat, z_e, z_q, alpha)?.total)
}

#[derive(Clone, Copy, Debug)]
pub struct VqLossTerms<'t> {
    pub reconstruction: Var<'t>,
    pub codebook: Var<'t>,
    pub commitment: Var<'t>,
    pub total: Var<'t>,
}

pub fn vq_loss_terms<'t>(
    x: Var<'t>,
    x_hat: Var<'t>,
    z_e: Var<'t>,
    z_q: Var<'t>,
    alpha: f64,
) -> Result<VqLossTerms<'t>> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape(
            "vq_loss",
            format!("x {:?} vs x_hat {:?}", x.shape(), x_hat.shape()),
        ));
    }
    if z_e.shape() != z_q.shape() {
        return Err(Error::shape(
            "vq_loss",
            format!("z_e {:?} vs z_q {:?}", z_e.shape(), z_q.shape()),
        ));
    }
    let batch = x.shape().first().copied().unwrap_or(1).max(1) as f64;
    let per_batch = |v: Var<'t>| v.square().sum().scale(1.0 / batch);
    let reconstruction = per_batch(x.sub(x_hat)?);
    let codebook = per_batch(z_e.detach().sub(z_q)?);
    let commitment = per_batch(z_q.detach().sub(z_e)?).scale(alpha);
    let total = reconstruction.add(codebook)?.add(commitment)?;
    Ok(VqLossTerms {
        reconstruction,
        codebook,
        commitment,
        total,
    })
}

/// Encoder MLPs, decoder MLP and one codebook per level.
#[derive(Clone, Debug)]
pub struct VqVae2 {
    pub config: VqConfig,
    pub input_dim: usize,
    pub params: ParamStore,
    pub encoder_bottom: Mlp,
    pub encoder_top: Mlp,
    pub decoder: Mlp,
    pub codebook_top: Codebook,
    pub codebook_bottom: Codebook,
    frozen: bool,
}

/// Everything a forward pass produces. Latents are `[B, positions, d]`.
#[derive(Clone, Debug)]
pub struct VqForward<'t> {
    pub z_e_top: Var<'t>,
    pub z_e_bottom: Var<'t>,
    pub z_q_top: Var<'t>,
    pub z_q_bottom: Var<'t>,
    pub idx_top: Vec<usize>,
    pub idx_bottom: Vec<usize>,
    pub x_hat: Var<'t>,
}

impl<'t> VqForward<'t> {
    /// Quantization loss summed over both levels.
    pub fn loss(&self, x: Var<'t>, alpha: f64) -> Result<VqLossTerms<'t>> {
        let z_e = Var::concat(&[self.z_e_top, self.z_e_bottom], 1)?;
        let z_q = Var::concat(&[self.z_q_top, self.z_q_bottom], 1)?;
        vq_loss_terms(x, self.x_hat, z_e, z_q, alpha)
    }
}

impl VqVae2 {
    /// `input_dim` is the flattened window width.
    pub fn new(config: &VqConfig, input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (h, d) = (config.hidden, config.latent_dim);
        let pb = config.bottom_positions;
        let pt = config.top_positions();
        let encoder_bottom = Mlp::new(
            &mut params,
            "enc_bottom",
            &[input_dim, h, h, pb * d],
            Activation::Tanh,
            &mut rng,
        );
        let encoder_top = Mlp::new(
            &mut params,
            "enc_top",
            &[pt * d, h, h, pt * d],
            Activation::Tanh,
            &mut rng,
        );
        let decoder = Mlp::new(
            &mut params,
            "dec",
            &[(pt + pb) * d, h, h, input_dim],
            Activation::Tanh,
            &mut rng,
        );
        let codebook_top = Codebook::new(
            &mut params,
            "codebook_top",
            config.codebook_size,
            d,
            Level::Top,
            &mut rng,
        );
        let codebook_bottom = Codebook::new(
            &mut params,
            "codebook_bottom",
            config.codebook_size,
            d,
            Level::Bottom,
            &mut rng,
        );
        VqVae2 {
            config: config.clone(),
            input_dim,
            params,
            encoder_bottom,
            encoder_top,
            decoder,
            codebook_top,
            codebook_bottom,
            frozen: false,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn check_input(&self, x: &Var<'_>) -> Result<usize> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(Error::shape(
                "vq_encode",
                format!(
                    "expected a [batch, {}] window batch, got {:?}",
                    self.input_dim, s
                ),
            ));
        }
        Ok(s[0])
    }

    /// Continuous latents `(z_e_top, z_e_bottom)`.
    pub fn encode_latents<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let b = self.check_input(&x)?;
        let d = self.config.latent_dim;
        let pb = self.config.bottom_positions;
        let pt = self.config.top_positions();
        let z_b = self.encoder_bottom.forward(p, x)?.reshape(&[b, pb, d])?;
        // stride-2 average of neighbouring bottom positions
        let pooled = z_b
            .reshape(&[b, pt, 2, d])?
            .mean_axis(2, false)?
            .reshape(&[b, pt * d])?;
        let z_t = self.encoder_top.forward(p, pooled)?.reshape(&[b, pt, d])?;
        Ok((z_t, z_b))
    }

    /// Latents snapped to both codebooks (straight-through in the backward pass).
    pub fn quantize_latents<'t>(
        &self,
        p: &Bound<'t>,
        z_e_top: Var<'t>,
        z_e_bottom: Var<'t>,
    ) -> Result<(Vec<usize>, Var<'t>, Vec<usize>, Var<'t>)> {
        let (idx_top, z_q_top) = self.codebook_top.lookup(p, z_e_top)?;
        let (idx_bottom, z_q_bottom) = self.codebook_bottom.lookup(p, z_e_bottom)?;
        Ok((idx_top, z_q_top, idx_bottom, z_q_bottom))
    }

    /// Full pass: encode, quantize, decode through the straight-through estimator.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<VqForward<'t>> {
        let (z_e_top, z_e_bottom) = self.encode_latents(p, x)?;
        let (idx_top, z_q_top, idx_bottom, z_q_bottom) =
            self.quantize_latents(p, z_e_top, z_e_bottom)?;
        let st_top = z_e_top.straight_through(z_q_top)?;
        let st_bottom = z_e_bottom.straight_through(z_q_bottom)?;
        let x_hat = self.decode(p, st_top, st_bottom)?;
        Ok(VqForward {
            z_e_top,
            z_e_bottom,
            z_q_top,
            z_q_bottom,
            idx_top,
            idx_bottom,
            x_hat,
        })
    }

    /// Window reconstruction from `[B, top, d]` and `[B, bottom, d]` latents.
    pub fn decode<'t>(&self, p: &Bound<'t>, z_top: Var<'t>, z_bottom: Var<'t>) -> Result<Var<'t>> {
        let d = self.config.latent_dim;
        let (st, sb) = (z_top.shape(), z_bottom.shape());
        let pt = self.config.top_positions();
        let pb = self.config.bottom_positions;
        if st.len() != 3
            || sb.len() != 3
            || st[1..] != [pt, d]
            || sb[1..] != [pb, d]
            || st[0] != sb[0]
        {
            return Err(Error::shape(
                "vq_decode",
                format!("expected [B, {pt}, {d}] and [B, {pb}, {d}], got {st:?} and {sb:?}"),
            ));
        }
        let b = st[0];
        let z = Var::concat(
            &[
                z_top.reshape(&[b, pt * d])?,
                z_bottom.reshape(&[b, pb * d])?,
            ],
            1,
        )?;
        self.decoder.forward(p, z)
    }

    /// Deterministic inference: latents and indices for a window batch.
    pub fn encode(&self, x: &Tensor) -> Result<EncodedWindows> {
        let tape = Tape::inference();
        let p = Bound::frozen(&tape, &self.params);
        let xv = tape.constant(x.clone());
        let (z_e_top, z_e_bottom) = self.encode_latents(&p, xv)?;
        let (idx_top, _, idx_bottom, _) = self.quantize_latents(&p, z_e_top, z_e_bottom)?;
        Ok(EncodedWindows {
            z_e_top: (*z_e_top.value()).clone(),
            z_e_bottom: (*z_e_bottom.value()).clone(),
            idx_top,
            idx_bottom,
        })
    }

    /// `decode(quantize(encode(x)))` as plain values.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let p = Bound::frozen(&tape, &self.params);
        let out = self.forward(&p, tape.constant(x.clone()))?;
        Ok((*out.x_hat.value()).clone())
    }

    pub fn record_usage(&mut self, idx_top: &[usize], idx_bottom: &[usize]) {
        self.codebook_top.record(idx_top);
        self.codebook_bottom.record(idx_bottom);
    }

    pub fn reset_usage(&mut self) {
        self.codebook_top.reset_usage();
        self.codebook_bottom.reset_usage();
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedWindows {
    pub z_e_top: Tensor,
    pub z_e_bottom: Tensor,
    pub idx_top: Vec<usize>,
    pub idx_bottom: Vec<usize>,
}

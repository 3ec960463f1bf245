//! Recurrent and self-attention pipelines merged through skip connections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::SeqConfig;
use crate::error::{Error, Result};
use crate::numerics::{
    uniform, Activation, Bound, LayerNorm, Linear, Mlp, ParamId, ParamStore, Tensor, Var,
};

/// Largest head count in `1..=max_heads` dividing `n_i`.
pub fn select_heads(n_i: usize, max_heads: usize) -> usize {
    (1..=max_heads.max(1))
        .rev()
        .find(|n| n_i.is_multiple_of(*n))
        .unwrap_or(1)
}

/// Standard gated recurrent unit.
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub input_dim: usize,
    pub hidden: usize,
    w_z: ParamId,
    u_z: ParamId,
    b_z: ParamId,
    w_r: ParamId,
    u_r: ParamId,
    b_r: ParamId,
    w_n: ParamId,
    u_n: ParamId,
    b_n: ParamId,
}

impl GruLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let mut add = |suffix: &str, shape: &[usize]| {
            store.add(format!("{name}.{suffix}"), uniform(rng, shape, k))
        };
        GruLayer {
            input_dim,
            hidden,
            w_z: add("w_z", &[input_dim, hidden]),
            u_z: add("u_z", &[hidden, hidden]),
            b_z: add("b_z", &[hidden]),
            w_r: add("w_r", &[input_dim, hidden]),
            u_r: add("u_r", &[hidden, hidden]),
            b_r: add("b_r", &[hidden]),
            w_n: add("w_n", &[input_dim, hidden]),
            u_n: add("u_n", &[hidden, hidden]),
            b_n: add("b_n", &[hidden]),
        }
    }

    /// `h_t = (1 − z)·h_prev + z·n` with sigmoid gates and a tanh candidate.
    /// `x_t` is `[B, in]`, `h_prev` is `[B, hidden]`.
    pub fn step<'t>(&self, p: &Bound<'t>, x_t: Var<'t>, h_prev: Var<'t>) -> Result<Var<'t>> {
        let (xs, hs) = (x_t.shape(), h_prev.shape());
        if xs.len() != 2 || xs[1] != self.input_dim || hs != [xs[0], self.hidden] {
            return Err(Error::shape(
                "gru_step",
                format!(
                    "x {xs:?}, h {hs:?} for input {} / hidden {}",
                    self.input_dim, self.hidden
                ),
            ));
        }
        let gate = |w, u, b, h: Var<'t>| -> Result<Var<'t>> {
            x_t.matmul(p.param(w))?
                .add(h.matmul(p.param(u))?)?
                .add(p.param(b))
        };
        let z = gate(self.w_z, self.u_z, self.b_z, h_prev)?.sigmoid();
        let r = gate(self.w_r, self.u_r, self.b_r, h_prev)?.sigmoid();
        let n = gate(self.w_n, self.u_n, self.b_n, r.mul(h_prev)?)?.tanh();
        z.neg().shift(1.0).mul(h_prev)?.add(z.mul(n)?)
    }

    /// Runs over `[B, L, in]` from a zero state; returns `[B, L, hidden]`.
    pub fn run<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::shape(
                "gru",
                format!("expected [batch, length, dim], got {s:?}"),
            ));
        }
        let mut h = p.tape().constant(Tensor::zeros(&[s[0], self.hidden]));
        let mut outs = Vec::with_capacity(s[1]);
        for t in 0..s[1] {
            h = self.step(p, x.select(1, t)?, h)?;
            outs.push(h);
        }
        Var::stack(&outs, 1)
    }
}

/// Sinusoidal positional encoding, `[length, dim]`.
pub fn positional_encoding(length: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; length * dim];
    for pos in 0..length {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * rate;
            data[pos * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![length, dim], data).expect("positive extents")
}

/// Positional encoding, multi-head self-attention, output projection, MLP.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub dim: usize,
    pub n_heads: usize,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        cfg: &SeqConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        TransformerBlock {
            dim,
            n_heads: select_heads(dim, cfg.max_heads),
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, rng),
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                &[dim, cfg.ffn_hidden, dim],
                Activation::Tanh,
                rng,
            ),
        }
    }

    fn check(&self, x: &Var<'_>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::shape(
                "attention",
                format!("expected [batch, length, {}], got {s:?}", self.dim),
            ));
        }
        Ok((s[0], s[1]))
    }

    /// `[B, L, d]` → `[B·H, L, d/H]`.
    fn split_heads<'t>(&self, x: Var<'t>, b: usize, l: usize) -> Result<Var<'t>> {
        let h = self.n_heads;
        x.reshape(&[b, l, h, self.dim / h])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * h, l, self.dim / h])
    }

    fn attend<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (b, l) = self.check(&x)?;
        let pe = p.tape().constant(positional_encoding(l, self.dim));
        let x = x.add(pe)?;
        let q = self.split_heads(self.wq.forward(p, x)?, b, l)?;
        let k = self.split_heads(self.wk.forward(p, x)?, b, l)?;
        let v = self.split_heads(self.wv.forward(p, x)?, b, l)?;
        let scale = 1.0 / ((self.dim / self.n_heads) as f64).sqrt();
        let weights = q.matmul(k.permute(&[0, 2, 1])?)?.scale(scale).softmax()?;
        let h = self.n_heads;
        let mixed = weights
            .matmul(v)?
            .reshape(&[b, h, l, self.dim / h])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, l, self.dim])?;
        Ok((mixed, weights.reshape(&[b, h, l, l])?))
    }

    /// Attention weights `[B, H, L, L]`; each row sums to 1.
    pub fn attention_weights<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.attend(p, x)?.1)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (mixed, _) = self.attend(p, x)?;
        let projected = p.dropout(self.wo.forward(p, mixed)?)?;
        self.mlp.forward(p, projected)
    }
}

/// Two transformer blocks, a one-layer GRU with layer norm, and a stacked
/// GRU reading the raw input, summed at the output.
#[derive(Clone, Debug)]
pub struct GruTransformer {
    pub dim: usize,
    pub params: ParamStore,
    pub transformer_in: Option<TransformerBlock>,
    pub gru1: Option<(GruLayer, LayerNorm)>,
    pub transformer_out: Option<TransformerBlock>,
    pub gru2: Vec<GruLayer>,
}

impl GruTransformer {
    /// Standalone model with its own parameter store.
    pub fn new(dim: usize, cfg: &SeqConfig, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::build(&mut params, "gt", dim, cfg, &mut rng);
        m.params = params;
        m
    }

    /// Registers parameters into `store` (the returned model's own store is empty).
    pub fn build(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        cfg: &SeqConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let transformer_in = cfg
            .use_transformer
            .then(|| TransformerBlock::new(store, &format!("{name}.tb1"), dim, cfg, rng));
        let gru1 = cfg.use_gru.then(|| {
            (
                GruLayer::new(store, &format!("{name}.gru1"), dim, dim, rng),
                LayerNorm::new(store, &format!("{name}.gru1_ln"), dim),
            )
        });
        let transformer_out = cfg
            .use_transformer
            .then(|| TransformerBlock::new(store, &format!("{name}.tb2"), dim, cfg, rng));
        let gru2 = if cfg.use_gru {
            (0..cfg.gru2_layers)
                .map(|i| GruLayer::new(store, &format!("{name}.gru2.{i}"), dim, dim, rng))
                .collect()
        } else {
            Vec::new()
        };
        GruTransformer {
            dim,
            params: ParamStore::new(),
            transformer_in,
            gru1,
            transformer_out,
            gru2,
        }
    }

    /// `t1 = TB1(x)`, `g1 = LN(GRU1(t1))`, `t2 = TB2(g1)`, `g2 = GRU2(x)`;
    /// output `t1 + g1 + t2 + g2` over whichever blocks exist.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::shape(
                "gru_transformer",
                format!("expected [batch, length, {}], got {s:?}", self.dim),
            ));
        }
        let mut parts = Vec::new();
        let mut cur = x;
        if let Some(tb) = &self.transformer_in {
            cur = tb.forward(p, cur)?;
            parts.push(cur);
        }
        if let Some((gru, ln)) = &self.gru1 {
            cur = ln.forward(p, gru.run(p, cur)?)?;
            parts.push(cur);
        }
        if let Some(tb) = &self.transformer_out {
            cur = tb.forward(p, cur)?;
            parts.push(cur);
        }
        if !self.gru2.is_empty() {
            let mut h = x;
            for layer in &self.gru2 {
                h = p.dropout(layer.run(p, h)?)?;
            }
            parts.push(h);
        }
        let mut out = parts[0];
        for &part in &parts[1..] {
            out = out.add(part)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn head_rule_examples() {
        assert_eq!(select_heads(12, 12), 12);
        assert_eq!(select_heads(7, 12), 7);
        assert_eq!(select_heads(13, 12), 1);
        assert_eq!(select_heads(72, 12), 12);
    }

    #[test]
    fn zero_weight_gru_halves_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = GruLayer::new(&mut store, "g", 2, 3, &mut rng);
        let zeros = store
            .with_values(
                store
                    .values()
                    .iter()
                    .map(|t| Tensor::zeros(t.shape()))
                    .collect(),
            )
            .unwrap();
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &zeros);
        let h = tape.constant(Tensor::matrix(&[&[0.4, -0.6, 0.9]]).unwrap());
        let x = tape.constant(Tensor::matrix(&[&[5.0, -3.0]]).unwrap());
        let out = g.step(&p, x, h).unwrap();
        assert_eq!(out.value().data(), &[0.2, -0.3, 0.45]);
    }

    #[test]
    fn single_position_attends_to_itself() {
        let cfg = SeqConfig::default();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tb = TransformerBlock::new(&mut store, "tb", 6, &cfg, &mut rng);
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &store);
        let x = tape.constant(
            Tensor::new(vec![2, 1, 6], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap(),
        );
        let w = tb.attention_weights(&p, x).unwrap();
        assert!(w.value().data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ablated_models_count_only_remaining_blocks() {
        let dim = 12;
        let full = GruTransformer::new(dim, &SeqConfig::default(), 3);
        let no_gru = GruTransformer::new(
            dim,
            &SeqConfig {
                use_gru: false,
                ..Default::default()
            },
            3,
        );
        let no_tf = GruTransformer::new(
            dim,
            &SeqConfig {
                use_transformer: false,
                ..Default::default()
            },
            3,
        );
        let tb = full.params.numel_with_prefix("gt.tb");
        let gru = full.params.numel_with_prefix("gt.gru");
        assert_eq!(full.params.numel(), tb + gru);
        assert_eq!(no_gru.params.numel(), tb);
        assert_eq!(no_tf.params.numel(), gru);
    }
}

//! Finite-difference checks of every primitive, layer and objective, shared
//! by the `gradcheck` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    critic_loss, generator_adv_loss, penalty_gradient_norm, vq_generator_total, Critic,
};
use crate::aligner::TemporalAligner;
use crate::config::{AdvConfig, AlignerConfig, InputConfig, LossConfig, SeqConfig, VqConfig};
use crate::data::Skeleton;
use crate::error::Result;
use crate::losses::{
    frame_softmax_cross_entropy, loss_dist, loss_dop, loss_kld, loss_reconstruction, loss_style,
    loss_total, probability_huber, LossTerms,
};
use crate::modalities::SpeakerSpace;
use crate::numerics::{
    grad_check_named, grad_check_store, grad_check_surrogate, huber, Activation, Bound,
    GradCheckOptions, GradCheckReport, LayerNorm, Mlp, ParamStore, Tape, Tensor, Var,
};
use crate::quantize::{vq_loss, VqVae2};
use crate::seqmodel::{GruLayer, GruTransformer, TransformerBlock};

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    /// `op`, `layer` or `loss`.
    pub group: String,
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteReport {
    pub tolerance: f64,
    pub entries: Vec<GradEntry>,
    pub max_rel_error: f64,
    pub pass: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape matches data")
}

/// Magnitudes in `[0.2, 1.0]` with random signs; keeps kinks out of reach.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `Σ w ⊙ y` with fixed pseudo-random `w`, so every output coordinate
/// contributes a distinct weight.
fn weighted<'t>(y: Var<'t>) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = uniform(&mut rng, &y.shape(), -1.0, 1.0);
    Ok(y.mul(y.tape().constant(w))?.sum())
}

struct Suite {
    entries: Vec<GradEntry>,
    opts: GradCheckOptions,
}

impl Suite {
    fn push(&mut self, group: &str, name: &str, report: GradCheckReport) {
        self.entries.push(GradEntry {
            group: group.into(),
            name: name.into(),
            max_rel_error: report.max_rel_error,
            coords: report.coords_checked,
        });
    }

    fn leaves<F>(&mut self, group: &str, name: &str, params: &[Tensor], f: F) -> Result<()>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let names: Vec<String> = (0..params.len()).map(|i| format!("{name}[{i}]")).collect();
        let report = grad_check_named(f, &names, params, &self.opts)?;
        self.push(group, name, report);
        Ok(())
    }

    fn store<F>(
        &mut self,
        group: &str,
        name: &str,
        store: &ParamStore,
        skip: &[&str],
        f: F,
    ) -> Result<()>
    where
        F: for<'t> Fn(&Bound<'t>) -> Result<Var<'t>>,
    {
        let opts = GradCheckOptions {
            skip_prefixes: skip.iter().map(|s| s.to_string()).collect(),
            ..self.opts.clone()
        };
        let report = grad_check_store(f, store, &opts)?;
        self.push(group, name, report);
        Ok(())
    }
}

fn ops(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let a = uniform(rng, &[3, 4], -1.0, 1.0);
    let b = uniform(rng, &[4, 2], -1.0, 1.0);
    let c = uniform(rng, &[3, 4], -1.0, 1.0);
    let pos = uniform(rng, &[3, 4], 0.5, 1.5);
    let kinked = off_zero(rng, &[3, 4]);
    s.leaves("op", "matmul", &[a.clone(), b], |_, p| {
        weighted(p[0].matmul(p[1])?)
    })?;
    s.leaves("op", "add", &[a.clone(), c.clone()], |_, p| {
        weighted(p[0].add(p[1])?)
    })?;
    s.leaves("op", "sub", &[a.clone(), c.clone()], |_, p| {
        weighted(p[0].sub(p[1])?)
    })?;
    s.leaves("op", "mul", &[a.clone(), c.clone()], |_, p| {
        weighted(p[0].mul(p[1])?)
    })?;
    s.leaves("op", "div", &[a.clone(), pos.clone()], |_, p| {
        weighted(p[0].div(p[1])?)
    })?;
    s.leaves("op", "concat", &[a.clone(), c.clone()], |_, p| {
        weighted(Var::concat(&[p[0], p[1]], 1)?)
    })?;
    s.leaves("op", "slice", std::slice::from_ref(&a), |_, p| {
        weighted(p[0].slice(1, 1, 2)?)
    })?;
    s.leaves("op", "mean", std::slice::from_ref(&a), |_, p| {
        Ok(p[0].mean_axis(0, false)?.square().sum())
    })?;
    s.leaves("op", "sum", std::slice::from_ref(&a), |_, p| {
        Ok(p[0].sum_axis(1, false)?.square().sum())
    })?;
    s.leaves("op", "tanh", std::slice::from_ref(&a), |_, p| {
        weighted(p[0].tanh())
    })?;
    s.leaves("op", "sigmoid", std::slice::from_ref(&a), |_, p| {
        weighted(p[0].sigmoid())
    })?;
    s.leaves("op", "relu", std::slice::from_ref(&kinked), |_, p| {
        weighted(p[0].relu())
    })?;
    s.leaves("op", "softmax", std::slice::from_ref(&a), |_, p| {
        weighted(p[0].softmax()?)
    })?;
    s.leaves("op", "layernorm", std::slice::from_ref(&a), |_, p| {
        weighted(p[0].layernorm(1e-5)?)
    })?;
    s.leaves("op", "exp", std::slice::from_ref(&a), |_, p| {
        weighted(p[0].exp())
    })?;
    s.leaves("op", "log", std::slice::from_ref(&pos), |_, p| {
        weighted(p[0].log()?)
    })?;
    s.leaves("op", "abs", std::slice::from_ref(&kinked), |_, p| {
        weighted(p[0].abs())
    })?;
    s.leaves("op", "pow", std::slice::from_ref(&pos), |_, p| {
        weighted(p[0].pow(2.5)?)
    })?;
    s.leaves("op", "l1norm", &[kinked], |_, p| Ok(p[0].l1norm().square()))?;
    s.leaves("op", "l2norm", std::slice::from_ref(&a), |_, p| {
        p[0].l2norm()?.square().sqrt()
    })?;
    let target = uniform(rng, &[3, 4], -1.0, 1.0);
    let wide = a.map(|v| 3.0 * v);
    s.leaves("op", "huber", &[wide, target], |_, p| {
        huber(p[0], p[1], 1.0)
    })?;
    Ok(())
}

fn layers(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[4, 6, 3], Activation::Tanh, rng);
    let ln = LayerNorm::new(&mut store, "ln", 3);
    let x = store.add("x", uniform(rng, &[2, 4], -1.0, 1.0));
    s.store("layer", "mlp_layernorm", &store, &[], |p| {
        weighted(ln.forward(p, mlp.forward(p, p.param(x))?)?)
    })?;

    let mut store = ParamStore::new();
    let gru = GruLayer::new(&mut store, "gru", 3, 4, rng);
    let x = store.add("x", uniform(rng, &[2, 3], -1.0, 1.0));
    let h = store.add("h", uniform(rng, &[2, 4], -1.0, 1.0));
    s.store("layer", "gru_step", &store, &[], |p| {
        weighted(gru.step(p, p.param(x), p.param(h))?)
    })?;
    let seq = store.add("seq", uniform(rng, &[2, 5, 3], -1.0, 1.0));
    s.store("layer", "gru_sequence", &store, &[], |p| {
        weighted(gru.run(p, p.param(seq))?)
    })?;

    let cfg = SeqConfig {
        max_heads: 3,
        ffn_hidden: 8,
        gru2_layers: 1,
        ..SeqConfig::default()
    };
    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut store, "tb", 6, &cfg, rng);
    let x = store.add("x", uniform(rng, &[2, 4, 6], -1.0, 1.0));
    s.store("layer", "attention", &store, &[], |p| {
        weighted(block.forward(p, p.param(x))?)
    })?;

    let mut store = ParamStore::new();
    let gt = GruTransformer::build(&mut store, "gt", 6, &cfg, rng);
    let x = store.add("x", uniform(rng, &[2, 4, 6], -1.0, 1.0));
    s.store("layer", "gru_transformer", &store, &[], |p| {
        weighted(gt.forward(p, p.param(x))?)
    })?;

    let inputs = InputConfig {
        speakers: 3,
        speaker_embed_dim: 3,
        style_dim: 2,
        ..InputConfig::default()
    };
    let mut store = ParamStore::new();
    let space = SpeakerSpace::new(&mut store, "speaker", &inputs, 5, rng);
    let feats = store.add("features", uniform(rng, &[2, 5], -1.0, 1.0));
    let noise = uniform(rng, &[2, 2], -1.0, 1.0);
    s.store("layer", "speaker_sample_decision", &store, &[], |p| {
        let z = space.sample(p, &[0, 2], &noise)?.z;
        let probs = space.decide(p, p.param(feats))?.probs;
        weighted(z)?.add(weighted(probs)?)
    })?;

    let vq_cfg = VqConfig {
        window: 4,
        hidden: 8,
        latent_dim: 2,
        bottom_positions: 2,
        codebook_size: 4,
        alpha: 0.25,
    };
    let mut vq = VqVae2::new(&vq_cfg, 12, rng.random());
    let x_vals = uniform(rng, &[3, 12], -1.0, 1.0);
    s.store(
        "layer",
        "vq_chain_decoder",
        &vq.params,
        &["enc_", "codebook_"],
        |p| {
            let x = p.tape().constant(x_vals.clone());
            vq.forward(p, x)?.loss(x, vq_cfg.alpha).map(|t| t.total)
        },
    )?;
    straight_through_identity(s, &vq, &x_vals)?;

    vq.freeze();
    let ac = AlignerConfig {
        fc_dim: 4,
        hidden: 6,
        quantize_latents: false,
        ..AlignerConfig::default()
    };
    // VQ_G ids stay valid because the aligner parameters are appended after them
    let mut store = vq.params.clone();
    let aligner =
        TemporalAligner::new(&mut store, "aligner", &ac, 5, 3, vq_cfg.latent_width(), rng);
    let w = store.add("w", uniform(rng, &[2, 4, 5], -1.0, 1.0));
    s.store("layer", "temporal_aligner", &store, &[], |p| {
        weighted(aligner.synthesize_sequence(p, &vq, p, p.param(w))?.frames)
    })?;
    Ok(())
}

/// The straight-through backward hands the decoder-input gradient to the
/// encoder latents unchanged; compare it against central differences of
/// the decoder loss at the quantized point.
fn straight_through_identity(s: &mut Suite, vq: &VqVae2, x_vals: &Tensor) -> Result<()> {
    let top_shape = [
        x_vals.shape()[0],
        vq.config.top_positions(),
        vq.config.latent_dim,
    ];
    let enc = vq.encode(x_vals)?;
    let loss_at = |tape: &Tape, zt: Var<'_>, zb: Var<'_>| -> Result<f64> {
        let p = Bound::frozen(tape, &vq.params);
        weighted(vq.decode(&p, zt, zb)?).map(|v| v.item())
    };
    let tape = Tape::new();
    let p = Bound::frozen(&tape, &vq.params);
    let ze_t = tape.leaf(enc.z_e_top.reshaped(&top_shape)?);
    let ze_b = tape.leaf(enc.z_e_bottom.clone());
    let (_, zq_t, _, zq_b) = vq.quantize_latents(&p, ze_t, ze_b)?;
    let st_t = ze_t.straight_through(zq_t)?;
    let st_b = ze_b.straight_through(zq_b)?;
    let loss = weighted(vq.decode(&p, st_t, st_b)?)?;
    let grads = tape.grad(loss, &[ze_t, ze_b], false)?;
    let (q_t, q_b) = ((*zq_t.value()).clone(), (*zq_b.value()).clone());
    let eps = s.opts.epsilon;
    let mut worst = 0.0f64;
    let mut coords = 0;
    for (which, g) in grads.iter().enumerate() {
        let base = if which == 0 { &q_t } else { &q_b };
        for j in 0..base.numel() {
            let mut plus = base.clone();
            plus.data_mut()[j] += eps;
            let mut minus = base.clone();
            minus.data_mut()[j] -= eps;
            let eval = |z: Tensor| -> Result<f64> {
                let t = Tape::new();
                let (zt, zb) = if which == 0 {
                    (t.constant(z), t.constant(q_b.clone()))
                } else {
                    (t.constant(q_t.clone()), t.constant(z))
                };
                loss_at(&t, zt, zb)
            };
            let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
            let a = g.value().data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            coords += 1;
        }
    }
    s.entries.push(GradEntry {
        group: "layer".into(),
        name: "vq_straight_through".into(),
        max_rel_error: worst,
        coords,
    });
    Ok(())
}

fn objectives(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let x = uniform(rng, &[3, 5], -1.0, 1.0);
    let x_hat = uniform(rng, &[3, 5], -1.0, 1.0);
    let z_e = uniform(rng, &[3, 2, 4], -1.0, 1.0);
    let z_q = uniform(rng, &[3, 2, 4], -1.0, 1.0);
    let (ze0, zq0) = (z_e.clone(), z_q.clone());
    let names: Vec<String> = ["x", "x_hat", "z_e", "z_q"]
        .iter()
        .map(|n| format!("vq_loss.{n}"))
        .collect();
    let report = grad_check_surrogate(
        |_, p| vq_loss(p[0], p[1], p[2], p[3], 0.25),
        |t, p| {
            let rec = p[0].sub(p[1])?.square().sum().scale(1.0 / 3.0);
            let codebook = t
                .constant(ze0.clone())
                .sub(p[3])?
                .square()
                .sum()
                .scale(1.0 / 3.0);
            let commitment = t
                .constant(zq0.clone())
                .sub(p[2])?
                .square()
                .sum()
                .scale(0.25 / 3.0);
            rec.add(codebook)?.add(commitment)
        },
        &names,
        &[x.clone(), x_hat.clone(), z_e, z_q],
        &s.opts,
    )?;
    s.push("loss", "vq_loss", report);

    let adv = AdvConfig {
        critic_hidden: vec![6, 6],
        ..AdvConfig::default()
    };
    let critic = Critic::new(5, &adv, rng.random());
    let u = uniform(rng, &[3, 1], 0.0, 1.0);
    let (real, fake) = (x.clone(), x_hat.clone());
    s.store("loss", "critic_loss", &critic.params, &[], |p| {
        critic_loss(&critic, p, &real, &fake, &u, &adv).map(|l| l.total)
    })?;
    let x_mix = crate::adversarial::interpolate(&real, &fake, &u)?;
    s.store("loss", "critic_penalty_norm", &critic.params, &[], |p| {
        weighted(penalty_gradient_norm(&critic, p, &x_mix)?)
    })?;
    let mut with_fake = critic.params.clone();
    let fake_id = with_fake.add("fake", fake.clone());
    s.store("loss", "generator_adv_loss", &with_fake, &[], |p| {
        generator_adv_loss(&critic, p, p.param(fake_id), &adv)
    })?;
    s.leaves(
        "loss",
        "vq_generator_total",
        &[x.clone(), x_hat.clone()],
        |_, p| vq_generator_total(p[0].square().sum(), p[1].sum(), &adv),
    )?;

    let sk = Skeleton::upper11();
    let rc = sk.rc_matrix();
    let fd = sk.frame_dim();
    let g = uniform(rng, &[2, 8, fd], -0.8, 0.8);
    let g_star = uniform(rng, &[2, 8, fd], -0.8, 0.8);
    let thr = 1.0;
    let target = g_star.clone();
    s.leaves("loss", "l_abs", std::slice::from_ref(&g), |t, p| {
        Ok(loss_reconstruction(p[0], t.constant(target.clone()), &rc, thr)?.0)
    })?;
    s.leaves("loss", "l_rel", std::slice::from_ref(&g), |t, p| {
        Ok(loss_reconstruction(p[0], t.constant(target.clone()), &rc, thr)?.1)
    })?;
    let (left, right) = (sk.left_arm().to_vec(), sk.right_arm().to_vec());
    s.leaves("loss", "l_dist", std::slice::from_ref(&g), |t, p| {
        loss_dist(p[0], t.constant(target.clone()), &left, &right, thr, false)
    })?;
    s.leaves("loss", "l_dop", std::slice::from_ref(&g), |t, p| {
        loss_dop(p[0], t.constant(target.clone()), thr)
    })?;

    let out2 = uniform(rng, &[2, 8, fd], -0.8, 0.8);
    let probs1 = uniform(rng, &[2, 3], 0.1, 0.5);
    let probs2 = uniform(rng, &[2, 3], 0.1, 0.5);
    let emb1 = uniform(rng, &[2, 4], -1.0, 1.0);
    let emb2 = uniform(rng, &[2, 4], -1.0, 1.0);
    // epsilon above every ratio keeps the clamp inactive
    s.leaves(
        "loss",
        "l_style",
        &[g.clone(), out2.clone(), probs1.clone(), probs2.clone()],
        |t, p| {
            let f_st = frame_softmax_cross_entropy(p[0], p[1])?;
            let f_sp = probability_huber(p[2], p[3], thr)?;
            loss_style(
                f_st,
                f_sp,
                t.constant(emb1.clone()),
                t.constant(emb2.clone()),
                1e3,
            )
        },
    )?;
    let mu = uniform(rng, &[2, 3], -1.0, 1.0);
    let logvar = uniform(rng, &[2, 3], -1.0, 1.0);
    s.leaves("loss", "l_kld", &[mu.clone(), logvar.clone()], |_, p| {
        loss_kld(p[0], p[1])
    })?;

    let lc = LossConfig {
        style_epsilon: 1e3,
        ..LossConfig::default()
    };
    let gan_w = uniform(rng, &[2, 8 * fd], -0.1, 0.1);
    s.leaves(
        "loss",
        "l_total",
        &[g, out2, probs1, probs2, mu, logvar],
        |t, p| {
            let target = t.constant(target.clone());
            let (abs, rel) = loss_reconstruction(p[0], target, &rc, lc.huber_threshold)?;
            let gan = p[0]
                .reshape(&[2, 8 * fd])?
                .mul(t.constant(gan_w.clone()))?
                .sum();
            let terms = LossTerms {
                gan,
                rel,
                abs,
                dist: loss_dist(p[0], target, &left, &right, lc.huber_threshold, false)?,
                style: loss_style(
                    frame_softmax_cross_entropy(p[0], p[1])?,
                    probability_huber(p[2], p[3], lc.huber_threshold)?,
                    t.constant(emb1.clone()),
                    t.constant(emb2.clone()),
                    lc.style_epsilon,
                )?,
                kld: loss_kld(p[4], p[5])?,
                dop: loss_dop(p[0], target, lc.huber_threshold)?,
            };
            loss_total(&terms, &lc)
        },
    )?;
    Ok(())
}

/// Runs every check; `pass` holds when all errors are within [`GRAD_TOLERANCE`].
pub fn gradient_suite(seed: u64) -> Result<GradSuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suite = Suite {
        entries: Vec::new(),
        opts: GradCheckOptions {
            seed,
            ..GradCheckOptions::default()
        },
    };
    ops(&mut suite, &mut rng)?;
    layers(&mut suite, &mut rng)?;
    objectives(&mut suite, &mut rng)?;
    let max_rel_error = suite
        .entries
        .iter()
        .map(|e| e.max_rel_error)
        .fold(0.0, f64::max);
    Ok(GradSuiteReport {
        tolerance: GRAD_TOLERANCE,
        pass: max_rel_error <= GRAD_TOLERANCE,
        max_rel_error,
        entries: suite.entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_within_tolerance() {
        let report = gradient_suite(11).unwrap();
        let bad: Vec<_> = report
            .entries
            .iter()
            .filter(|e| e.max_rel_error > GRAD_TOLERANCE)
            .collect();
        assert!(bad.is_empty(), "{bad:#?}");
        assert!(report.entries.iter().all(|e| e.coords > 0));
    }
}

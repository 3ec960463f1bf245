//! Critic network and divergence-penalized adversarial objectives.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::AdvConfig;
use crate::error::{Error, Result};
use crate::numerics::{Activation, Bound, Mlp, ParamStore, Tensor, Var};

/// MLP mapping a flattened sample to one unbounded score.
#[derive(Clone, Debug)]
pub struct Critic {
    pub params: ParamStore,
    pub mlp: Mlp,
    pub input_dim: usize,
}

impl Critic {
    pub fn new(input_dim: usize, cfg: &AdvConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut dims = vec![input_dim];
        dims.extend(&cfg.critic_hidden);
        dims.push(1);
        let mlp = Mlp::new(
            &mut params,
            "critic",
            &dims,
            Activation::LeakyRelu(cfg.critic_slope),
            &mut rng,
        );
        Critic {
            params,
            mlp,
            input_dim,
        }
    }

    /// Per-sample scores, `[B, 1]`.
    pub fn score<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(Error::shape(
                "critic",
                format!("expected [batch, {}], got {s:?}", self.input_dim),
            ));
        }
        let out = self.mlp.forward(p, x)?;
        if !out.value().is_finite() {
            return Err(Error::NonFinite("critic score".into()));
        }
        Ok(out)
    }
}

/// Per-sample interpolation weights `u ~ U(0, 1)`, shaped `[B, 1]`.
pub fn sample_interpolation(batch: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let u: Vec<f64> = (0..batch).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![batch, 1], u).expect("batch is positive")
}

/// `u·real + (1−u)·fake`, row by row.
pub fn interpolate(real: &Tensor, fake: &Tensor, u: &Tensor) -> Result<Tensor> {
    if real.shape() != fake.shape() || real.rank() != 2 || u.shape() != [real.shape()[0], 1] {
        return Err(Error::shape(
            "interpolate",
            format!("{:?} / {:?} / {:?}", real.shape(), fake.shape(), u.shape()),
        ));
    }
    let d = real.shape()[1];
    let data = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(i, (r, f))| {
            let w = u.data()[i / d];
            w * r + (1.0 - w) * f
        })
        .collect();
    Tensor::new(real.shape().to_vec(), data)
}

/// Squared input-gradient norm per sample, `[B, 1]`, recorded so it can be
/// differentiated again with respect to critic parameters.
fn penalty_sq_norms<'t>(critic: &Critic, p: &Bound<'t>, x_hat: &Tensor) -> Result<Var<'t>> {
    if !x_hat.is_finite() {
        return Err(Error::NonFinite("interpolated critic input".into()));
    }
    let tape = p.tape();
    let x = tape.leaf(x_hat.clone());
    let total = critic.score(p, x)?.sum();
    let g = tape.grad(total, &[x], true)?[0];
    if !g.value().is_finite() {
        return Err(Error::NonFinite("critic input gradient".into()));
    }
    g.square().sum_axis(1, true)
}

/// `‖∇_x̂ Dis(x̂)‖₂` for every row of `x_hat`.
pub fn penalty_gradient_norm<'t>(
    critic: &Critic,
    p: &Bound<'t>,
    x_hat: &Tensor,
) -> Result<Var<'t>> {
    let sq = penalty_sq_norms(critic, p, x_hat)?;
    // sqrt is not differentiable at 0
    if sq.value().data().iter().all(|&v| v > 0.0) {
        sq.sqrt()
    } else {
        sq.detach().sqrt()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CriticLoss<'t> {
    pub total: Var<'t>,
    pub real: Var<'t>,
    pub fake: Var<'t>,
    pub penalty: Var<'t>,
}

/// `mean Dis(real) − mean Dis(fake) + δ·mean ‖∇Dis(x̂)‖^p` (both score terms
/// negated under `flip_sign`).
pub fn critic_loss<'t>(
    critic: &Critic,
    p: &Bound<'t>,
    real: &Tensor,
    fake: &Tensor,
    u: &Tensor,
    cfg: &AdvConfig,
) -> Result<CriticLoss<'t>> {
    if real.shape() != fake.shape() {
        return Err(Error::shape(
            "critic_loss",
            format!("real {:?} vs fake {:?}", real.shape(), fake.shape()),
        ));
    }
    let tape = p.tape();
    let real_score = critic.score(p, tape.constant(real.clone()))?.mean();
    let fake_score = critic.score(p, tape.constant(fake.clone()))?.mean();
    let x_hat = interpolate(real, fake, u)?;
    let penalty = penalty_sq_norms(critic, p, &x_hat)?
        .pow(cfg.p / 2.0)?
        .mean()
        .scale(cfg.delta);
    let sign = if cfg.flip_sign { -1.0 } else { 1.0 };
    let total = real_score.sub(fake_score)?.scale(sign).add(penalty)?;
    if !total.value().is_finite() {
        return Err(Error::NonFinite("critic loss".into()));
    }
    Ok(CriticLoss {
        total,
        real: real_score,
        fake: fake_score,
        penalty,
    })
}

/// `mean Dis(fake)` (negated under `flip_sign`); gradients reach whatever
/// produced `fake`.
pub fn generator_adv_loss<'t>(
    critic: &Critic,
    p: &Bound<'t>,
    fake: Var<'t>,
    cfg: &AdvConfig,
) -> Result<Var<'t>> {
    let s = critic.score(p, fake)?.mean();
    Ok(if cfg.flip_sign { s.neg() } else { s })
}

/// `β·L_vq + γ·L_adv`.
pub fn vq_generator_total<'t>(vq: Var<'t>, adv: Var<'t>, cfg: &AdvConfig) -> Result<Var<'t>> {
    vq.scale(cfg.beta).add(adv.scale(cfg.gamma))
}

pub fn vq_generator_total_value(vq: f64, adv: f64, cfg: &AdvConfig) -> f64 {
    cfg.beta * vq + cfg.gamma * adv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn linear_critic(w: &[f64]) -> Critic {
        let cfg = AdvConfig {
            critic_hidden: vec![],
            ..Default::default()
        };
        let mut c = Critic::new(w.len(), &cfg, 0);
        let layer = &c.mlp.layers[0];
        *c.params.get_mut(layer.weight) = Tensor::new(vec![w.len(), 1], w.to_vec()).unwrap();
        *c.params.get_mut(layer.bias) = Tensor::zeros(&[1]);
        c
    }

    #[test]
    fn linear_critic_adv_loss() {
        let c = linear_critic(&[1.0, 0.0]);
        let t = Tape::new();
        let p = Bound::frozen(&t, &c.params);
        let fake = t.constant(Tensor::matrix(&[&[2.0, 5.0]]).unwrap());
        let l = generator_adv_loss(&c, &p, fake, &AdvConfig::default()).unwrap();
        assert_eq!(l.item(), 2.0);
    }

    #[test]
    fn linear_critic_penalty_is_closed_form() {
        let w = [0.3, -0.4, 1.2];
        let c = linear_critic(&w);
        let t = Tape::new();
        let p = Bound::new(&t, &c.params, true);
        let x = Tensor::matrix(&[&[0.1, 0.2, 0.3], &[-1.0, 0.5, 2.0]]).unwrap();
        let norms = penalty_gradient_norm(&c, &p, &x).unwrap();
        let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        for &n in norms.value().data() {
            assert!((n - wn).abs() < 1e-12);
        }
    }

    #[test]
    fn vq_total_arithmetic() {
        assert_eq!(
            vq_generator_total_value(1.25, 2.0, &AdvConfig::default()),
            3.25
        );
        let cfg = AdvConfig {
            gamma: 0.0,
            ..Default::default()
        };
        assert_eq!(vq_generator_total_value(1.25, 2.0, &cfg), 1.25);
    }

    #[test]
    fn interpolation_swap_symmetry() {
        let a = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::matrix(&[&[-1.0, 0.5], &[0.0, 8.0]]).unwrap();
        let u = Tensor::new(vec![2, 1], vec![0.3, 0.9]).unwrap();
        let u_flip = u.map(|v| 1.0 - v);
        let x1 = interpolate(&a, &b, &u).unwrap();
        let x2 = interpolate(&b, &a, &u_flip).unwrap();
        assert!(x1.max_abs_diff(&x2) < 1e-15);
    }
}

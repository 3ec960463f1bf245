//! Generator objectives and their weighted combination.

mod schedule;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::numerics::{huber, Tensor, Var};

pub use schedule::{dropout_at_epoch, lr_at_epoch, EarlyStopping};

/// Orders of forward differences in the derivative-of-position loss.
pub const DOP_ORDERS: usize = 6;
/// Lower bound on the style-loss denominator.
pub const STYLE_FLOOR: f64 = 1e-8;

fn check_frames(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<(usize, usize, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb || sa.len() != 3 || sa[2] % 3 != 0 {
        return Err(Error::shape(
            op,
            format!("expected matching [batch, frames, 3J], got {sa:?} and {sb:?}"),
        ));
    }
    Ok((sa[0], sa[1], sa[2]))
}

/// Huber penalty summed over xyz, averaged over every joint of every frame.
fn joint_huber<'t>(a: Var<'t>, b: Var<'t>, threshold: f64) -> Result<Var<'t>> {
    let joints = (a.numel() / 3).max(1) as f64;
    Ok(a.sub(b)?.huber_elem(threshold).sum().scale(1.0 / joints))
}

/// `(L_abs, L_rel)` for `[B, F, 3J]` relative-coordinate sequences; `rc` is
/// the `[3J, 3J]` relative-to-absolute matrix.
pub fn loss_reconstruction<'t>(
    g: Var<'t>,
    g_star: Var<'t>,
    rc: &Tensor,
    threshold: f64,
) -> Result<(Var<'t>, Var<'t>)> {
    let (_, _, fd) = check_frames("loss_reconstruction", &g, &g_star)?;
    if rc.shape() != [fd, fd] {
        return Err(Error::shape(
            "loss_reconstruction",
            format!("Rc {:?} for frame width {fd}", rc.shape()),
        ));
    }
    let rel = joint_huber(g, g_star, threshold)?;
    let r = g.tape().constant(rc.clone());
    let abs = joint_huber(g.matmul(r)?, g_star.matmul(r)?, threshold)?;
    Ok((abs, rel))
}

/// Joints `idx` of `[B, F, 3J]` as `[K, B·F, 3]`.
fn gather_joints<'t>(x: Var<'t>, idx: &[usize]) -> Result<Var<'t>> {
    let s = x.shape();
    let j = s[2] / 3;
    x.reshape(&[s[0] * s[1], j, 3])?
        .permute(&[1, 0, 2])?
        .gather_rows(idx)
}

/// Huber between left-minus-right arm offsets of `g` and of `g_star`, per
/// arm joint pair; `literal_plus` compares against `g*_l + g*_r` instead.
pub fn loss_dist<'t>(
    g: Var<'t>,
    g_star: Var<'t>,
    left: &[usize],
    right: &[usize],
    threshold: f64,
    literal_plus: bool,
) -> Result<Var<'t>> {
    let (_, _, fd) = check_frames("loss_dist", &g, &g_star)?;
    if left.len() != right.len() || left.is_empty() {
        return Err(Error::shape(
            "loss_dist",
            format!("arm lists of length {} and {}", left.len(), right.len()),
        ));
    }
    if let Some(&bad) = left.iter().chain(right).find(|&&j| j >= fd / 3) {
        return Err(Error::shape(
            "loss_dist",
            format!("joint {bad} outside a {}-joint frame", fd / 3),
        ));
    }
    let gen = gather_joints(g, left)?.sub(gather_joints(g, right)?)?;
    let (rl, rr) = (gather_joints(g_star, left)?, gather_joints(g_star, right)?);
    let real = if literal_plus {
        rl.add(rr)?
    } else {
        rl.sub(rr)?
    };
    joint_huber(gen, real, threshold)
}

/// Per-sample cross-entropy between per-frame softmaxes of `[B, F, D]`
/// outputs, averaged over frames; `[B]`.
pub fn frame_softmax_cross_entropy<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(Error::shape(
            "style_ce",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let frames = a.shape()[1] as f64;
    let ce = a.softmax()?.mul(b.log_softmax()?)?.neg();
    Ok(ce
        .sum_axis(2, false)?
        .sum_axis(1, false)?
        .scale(1.0 / frames))
}

/// Per-sample Huber between two `[B, S]` probability vectors; `[B]`.
pub fn probability_huber<'t>(a: Var<'t>, b: Var<'t>, threshold: f64) -> Result<Var<'t>> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::shape(
            "style_spd",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    a.sub(b)?.huber_elem(threshold).mean_axis(1, false)
}

/// `−mean(min((f_st + f_sp) / ‖e1 − e2‖₁, ε))` over the batch.
///
/// The denominator is held constant and floored at [`STYLE_FLOOR`].
pub fn loss_style<'t>(
    f_st: Var<'t>,
    f_sp: Var<'t>,
    emb1: Var<'t>,
    emb2: Var<'t>,
    epsilon: f64,
) -> Result<Var<'t>> {
    let b = f_st.shape().first().copied().unwrap_or(1);
    if f_st.shape() != [b]
        || f_sp.shape() != [b]
        || emb1.shape() != emb2.shape()
        || emb1.shape()[0] != b
    {
        return Err(Error::shape(
            "loss_style",
            format!(
                "f_st {:?}, f_sp {:?}, embeddings {:?} / {:?}",
                f_st.shape(),
                f_sp.shape(),
                emb1.shape(),
                emb2.shape()
            ),
        ));
    }
    let dist = emb1.sub(emb2)?.abs().sum_axis(1, false)?.value();
    let mut inv = Vec::with_capacity(b);
    for &d in dist.data() {
        if d < STYLE_FLOOR {
            log::warn!(
                "speaker embeddings coincide (L1 distance {d:e}); style denominator floored"
            );
        }
        inv.push(1.0 / d.max(STYLE_FLOOR));
    }
    let ratio = f_st
        .add(f_sp)?
        .mul_const(Rc::new(Tensor::new(vec![b], inv)?))?;
    let clamped = ratio.neg().shift(epsilon).relu().neg().shift(epsilon);
    Ok(clamped.mean().neg())
}

/// `KL(N(mu, diag exp(logvar)) ‖ N(0, I))`, mean over the batch.
pub fn loss_kld<'t>(mu: Var<'t>, logvar: Var<'t>) -> Result<Var<'t>> {
    if mu.shape() != logvar.shape() {
        return Err(Error::shape(
            "loss_kld",
            format!("{:?} vs {:?}", mu.shape(), logvar.shape()),
        ));
    }
    let batch = mu.shape().first().copied().unwrap_or(1).max(1) as f64;
    Ok(logvar
        .exp()
        .add(mu.square())?
        .sub(logvar)?
        .shift(-1.0)
        .sum()
        .scale(0.5 / batch))
}

/// `(1/6)·Σ_{i=1..6} Δⁱx` along frames, each order zero-padded at the end.
pub fn f_dop<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 3 || s[1] <= DOP_ORDERS {
        return Err(Error::shape(
            "loss_dop",
            format!("need [batch, >= {} frames, d], got {s:?}", DOP_ORDERS + 1),
        ));
    }
    let f = s[1];
    let mut diff = x;
    let mut total: Option<Var<'t>> = None;
    for order in 1..=DOP_ORDERS {
        let len = f - order;
        diff = diff.slice(1, 1, len)?.sub(diff.slice(1, 0, len)?)?;
        let padded = diff.pad(1, 0, f)?;
        total = Some(match total {
            Some(t) => t.add(padded)?,
            None => padded,
        });
    }
    Ok(total
        .expect("at least one order")
        .scale(1.0 / DOP_ORDERS as f64))
}

/// Mean Huber between derivative profiles.
pub fn loss_dop<'t>(g: Var<'t>, g_star: Var<'t>, threshold: f64) -> Result<Var<'t>> {
    if g.shape() != g_star.shape() {
        return Err(Error::shape(
            "loss_dop",
            format!("{:?} vs {:?}", g.shape(), g_star.shape()),
        ));
    }
    huber(f_dop(g)?, f_dop(g_star)?, threshold)
}

/// The seven generator terms as tape values.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub gan: Var<'t>,
    pub rel: Var<'t>,
    pub abs: Var<'t>,
    pub dist: Var<'t>,
    pub style: Var<'t>,
    pub kld: Var<'t>,
    pub dop: Var<'t>,
}

/// Plain values of every term plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub gan: f64,
    pub rel: f64,
    pub abs: f64,
    pub dist: f64,
    pub style: f64,
    pub kld: f64,
    pub dop: f64,
    pub total: f64,
}

impl LossValues {
    pub fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("gan", self.gan),
            ("rel", self.rel),
            ("abs", self.abs),
            ("dist", self.dist),
            ("style", self.style),
            ("kld", self.kld),
            ("dop", self.dop),
        ]
    }

    /// Running mean helper: `self + (other − self) / n`.
    pub fn accumulate(&mut self, other: &LossValues, n: usize) {
        let w = 1.0 / n as f64;
        let mix = |a: &mut f64, b: f64| *a += (b - *a) * w;
        mix(&mut self.gan, other.gan);
        mix(&mut self.rel, other.rel);
        mix(&mut self.abs, other.abs);
        mix(&mut self.dist, other.dist);
        mix(&mut self.style, other.style);
        mix(&mut self.kld, other.kld);
        mix(&mut self.dop, other.dop);
        mix(&mut self.total, other.total);
    }
}

impl<'t> LossTerms<'t> {
    fn named(&self) -> [(&'static str, Var<'t>); 7] {
        [
            ("gan", self.gan),
            ("rel", self.rel),
            ("abs", self.abs),
            ("dist", self.dist),
            ("style", self.style),
            ("kld", self.kld),
            ("dop", self.dop),
        ]
    }

    pub fn values(&self, total: f64) -> LossValues {
        LossValues {
            gan: self.gan.item(),
            rel: self.rel.item(),
            abs: self.abs.item(),
            dist: self.dist.item(),
            style: self.style.item(),
            kld: self.kld.item(),
            dop: self.dop.item(),
            total,
        }
    }
}

/// `π₁·L_gan + π₂·(L_rel + L_abs) + π₃·L_dist + π₄·L_style + π₅·L_KLD + π₆·L_DoP`.
pub fn loss_total<'t>(terms: &LossTerms<'t>, cfg: &LossConfig) -> Result<Var<'t>> {
    for (name, v) in terms.named() {
        if v.numel() != 1 {
            return Err(Error::shape(
                "loss_total",
                format!("term {name} is not a scalar: {:?}", v.shape()),
            ));
        }
        if !v.item().is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
    }
    let [p1, p2, p3, p4, p5, p6] = cfg.weights();
    terms
        .gan
        .scale(p1)
        .add(terms.rel.add(terms.abs)?.scale(p2))?
        .add(terms.dist.scale(p3))?
        .add(terms.style.scale(p4))?
        .add(terms.kld.scale(p5))?
        .add(terms.dop.scale(p6))
}

/// [`loss_total`] on plain numbers.
pub fn loss_total_value(v: &LossValues, cfg: &LossConfig) -> Result<f64> {
    for (name, x) in v.named() {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
    }
    let [p1, p2, p3, p4, p5, p6] = cfg.weights();
    Ok(p1 * v.gan + p2 * (v.rel + v.abs) + p3 * v.dist + p4 * v.style + p5 * v.kld + p6 * v.dop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Skeleton;
    use crate::numerics::Tape;

    fn seq<'t>(t: &'t Tape, f: usize, fd: usize, fill: impl Fn(usize, usize) -> f64) -> Var<'t> {
        let data = (0..f * fd).map(|i| fill(i / fd, i % fd)).collect();
        t.constant(Tensor::new(vec![1, f, fd], data).unwrap())
    }

    #[test]
    fn reconstruction_zero_at_identity_and_joint_average() {
        let sk = Skeleton::upper11();
        let t = Tape::new();
        let (f, fd) = (3, sk.frame_dim());
        let a = seq(&t, f, fd, |i, j| (i * 7 + j) as f64 * 0.01);
        let (abs, rel) = loss_reconstruction(a, a, &sk.rc_matrix(), 1.0).unwrap();
        assert_eq!((abs.item(), rel.item()), (0.0, 0.0));
        let b = seq(&t, f, fd, |i, j| {
            (i * 7 + j) as f64 * 0.01 + if i == 1 && j == 13 { 0.5 } else { 0.0 }
        });
        let (_, rel) = loss_reconstruction(a, b, &sk.rc_matrix(), 1.0).unwrap();
        assert!((rel.item() - 0.125 / (11.0 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn dist_single_joint_case() {
        let t = Tape::new();
        let g = t.constant(Tensor::new(vec![1, 1, 6], vec![0.0; 6]).unwrap());
        let r = t.constant(Tensor::new(vec![1, 1, 6], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let l = loss_dist(g, r, &[0], &[1], 1.0, false).unwrap();
        assert_eq!(l.item(), 0.5);
        assert_eq!(loss_dist(r, r, &[0], &[1], 1.0, false).unwrap().item(), 0.0);
        let both =
            t.constant(Tensor::new(vec![1, 1, 6], vec![1.0, 0.0, 0.0, 0.5, 0.0, 0.0]).unwrap());
        assert!(loss_dist(both, both, &[0], &[1], 1.0, true).unwrap().item() > 0.0);
        assert!(loss_dist(r, r, &[0], &[], 1.0, false).is_err());
    }

    #[test]
    fn kld_identities() {
        let t = Tape::new();
        let z = t.constant(Tensor::zeros(&[1, 1]));
        assert_eq!(loss_kld(z, z).unwrap().item(), 0.0);
        let one = t.constant(Tensor::ones(&[1, 1]));
        assert_eq!(loss_kld(one, z).unwrap().item(), 0.5);
    }

    #[test]
    fn dop_ramp_profile() {
        let t = Tape::new();
        let x = seq(&t, 10, 1, |i, _| i as f64);
        let d = f_dop(x).unwrap();
        let v = d.value();
        for k in 0..9 {
            assert!((v.data()[k] - 1.0 / 6.0).abs() < 1e-15);
        }
        assert_eq!(v.data()[9], 0.0);
        let short = seq(&t, 6, 1, |i, _| i as f64);
        assert!(f_dop(short).is_err());
    }

    #[test]
    fn dop_constant_sequences() {
        let t = Tape::new();
        let a = seq(&t, 8, 2, |_, _| 0.3);
        let b = seq(&t, 8, 2, |_, _| -1.7);
        assert_eq!(loss_dop(a, b, 1.0).unwrap().item(), 0.0);
    }

    #[test]
    fn style_clamp_and_entropy() {
        let t = Tape::new();
        let a = seq(&t, 2, 3, |i, j| (i + j) as f64);
        let f_st = frame_softmax_cross_entropy(a, a).unwrap();
        let p = a.value().data()[..3].to_vec();
        let z: f64 = p.iter().map(|v| v.exp()).sum();
        let entropy: f64 = p.iter().map(|v| -(v.exp() / z) * (v.exp() / z).ln()).sum();
        assert!((f_st.item() - entropy).abs() < 1e-12);
        let e1 = t.constant(Tensor::matrix(&[&[0.0, 0.0]]).unwrap());
        let e2 = t.constant(Tensor::matrix(&[&[0.1, 0.0]]).unwrap());
        let zero = t.constant(Tensor::zeros(&[1]));
        let l = loss_style(f_st, zero, e1, e2, 5.0).unwrap();
        assert_eq!(l.item(), -5.0);
    }

    #[test]
    fn total_with_default_weights() {
        let t = Tape::new();
        let one = t.scalar(1.0);
        let terms = LossTerms {
            gan: one,
            rel: one,
            abs: one,
            dist: one,
            style: one,
            kld: one,
            dop: one,
        };
        let total = loss_total(&terms, &LossConfig::default()).unwrap();
        assert!((total.item() - 102.004).abs() < 1e-12);
        let bad = LossTerms {
            kld: t.scalar(f64::NAN),
            ..terms
        };
        match loss_total(&bad, &LossConfig::default()) {
            Err(Error::NonFinite(m)) => assert!(m.contains("kld")),
            other => panic!("{other:?}"),
        }
    }
}

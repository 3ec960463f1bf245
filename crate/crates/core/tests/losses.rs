use aqgt_core::config::{LossConfig, ScheduleConfig};
use aqgt_core::data::Skeleton;
use aqgt_core::losses::{
    dropout_at_epoch, loss_dist, loss_dop, loss_kld, loss_reconstruction, loss_style, loss_total,
    lr_at_epoch, LossTerms,
};
use aqgt_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const M: usize = 8;

fn frames(v: &[f64]) -> Tensor {
    let fd = Skeleton::upper11().frame_dim();
    Tensor::new(vec![2, M, fd], v.to_vec()).unwrap()
}

fn motion() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, 2 * M * Skeleton::upper11().frame_dim())
}

#[test]
fn kld_matches_monte_carlo() {
    let mu = [0.4, -0.7, 0.1];
    let lv = [-0.5, 0.3, 0.8];
    let tape = Tape::new();
    let closed = loss_kld(
        tape.constant(Tensor::new(vec![1, 3], mu.to_vec()).unwrap()),
        tape.constant(Tensor::new(vec![1, 3], lv.to_vec()).unwrap()),
    )
    .unwrap()
    .item();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 400_000;
    let mut acc = 0.0;
    for _ in 0..n {
        for k in 0..3 {
            let sd = (0.5 * lv[k]).exp();
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = mu[k] + sd * e;
            acc += -0.5 * e * e - sd.ln() + 0.5 * z * z;
        }
    }
    let mc = acc / n as f64;
    assert!(
        (mc - closed).abs() / closed < 0.02,
        "monte carlo {mc} vs closed form {closed}"
    );
}

#[test]
fn schedules_are_monotone_and_bounded() {
    let s = ScheduleConfig::default();
    for e in 0..400 {
        assert!(lr_at_epoch(&s, e + 1) <= lr_at_epoch(&s, e));
        assert!(lr_at_epoch(&s, e) >= 1e-5);
        assert!(dropout_at_epoch(&s, e + 1) >= dropout_at_epoch(&s, e));
        assert!(dropout_at_epoch(&s, e) <= 0.3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reconstruction_losses_are_non_negative_and_vanish_at_truth(g in motion(), t in motion()) {
        let sk = Skeleton::upper11();
        let rc = sk.rc_matrix();
        let tape = Tape::new();
        let (gv, tv) = (tape.constant(frames(&g)), tape.constant(frames(&t)));
        let (abs, rel) = loss_reconstruction(gv, tv, &rc, 1.0).unwrap();
        let dist = loss_dist(gv, tv, sk.left_arm(), sk.right_arm(), 1.0, false).unwrap();
        let dop = loss_dop(gv, tv, 1.0).unwrap();
        for v in [abs, rel, dist, dop] {
            prop_assert!(v.item() >= 0.0);
        }
        let (abs, rel) = loss_reconstruction(tv, tv, &rc, 1.0).unwrap();
        let dist = loss_dist(tv, tv, sk.left_arm(), sk.right_arm(), 1.0, false).unwrap();
        let dop = loss_dop(tv, tv, 1.0).unwrap();
        for v in [abs, rel, dist, dop] {
            prop_assert_eq!(v.item(), 0.0);
        }
    }

    #[test]
    fn style_loss_stays_in_clamp_range(
        f in prop::collection::vec(0.0f64..20.0, 6),
        e in prop::collection::vec(-1.0f64..1.0, 12),
        eps in 0.1f64..10.0,
    ) {
        let tape = Tape::new();
        let v = |d: &[f64], s: &[usize]| tape.constant(Tensor::new(s.to_vec(), d.to_vec()).unwrap());
        let l = loss_style(v(&f[..3], &[3]), v(&f[3..], &[3]), v(&e[..6], &[3, 2]), v(&e[6..], &[3, 2]), eps)
            .unwrap()
            .item();
        prop_assert!((-eps..=0.0).contains(&l), "{l} outside [-{eps}, 0]");
    }

    #[test]
    fn total_is_linear_in_each_weight(vals in prop::collection::vec(-3.0f64..3.0, 7), k in 0usize..6, c in 0.0f64..5.0) {
        let tape = Tape::new();
        let s = |i: usize| tape.scalar(vals[i]);
        let terms = LossTerms { gan: s(0), rel: s(1), abs: s(2), dist: s(3), style: s(4), kld: s(5), dop: s(6) };
        let base = LossConfig::default();
        let mut bumped = base.clone();
        let slot = match k {
            0 => &mut bumped.pi1,
            1 => &mut bumped.pi2,
            2 => &mut bumped.pi3,
            3 => &mut bumped.pi4,
            4 => &mut bumped.pi5,
            _ => &mut bumped.pi6,
        };
        *slot += c;
        let component = match k {
            0 => vals[0],
            1 => vals[1] + vals[2],
            n => vals[n + 1],
        };
        let diff = loss_total(&terms, &bumped).unwrap().item() - loss_total(&terms, &base).unwrap().item();
        prop_assert!((diff - c * component).abs() <= 1e-9 * (1.0 + diff.abs()));
    }
}

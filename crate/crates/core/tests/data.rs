use aqgt_core::data::{
    corpus_from_str, corpus_to_string, filter_sot, generate_corpus, CorpusConfig, GestureClip,
    Skeleton, FRAME_RATE, SAMPLE_RATE,
};
use proptest::prelude::*;

fn corpus(clips: usize, seed: u64) -> (Skeleton, Vec<GestureClip>) {
    let sk = Skeleton::upper11();
    let c = generate_corpus(
        &CorpusConfig {
            clips,
            bad_clip_rate: 0.0,
            ..Default::default()
        },
        &sk,
        seed,
    )
    .unwrap();
    (sk, c.clips)
}

fn wrist_track(sk: &Skeleton, clip: &GestureClip, wrist: usize) -> Vec<[f64; 3]> {
    let abs = sk.rel_to_abs(&clip.frames).unwrap();
    let fd = sk.frame_dim();
    (0..clip.n_frames)
        .map(|f| {
            [
                abs[f * fd + 3 * wrist],
                abs[f * fd + 3 * wrist + 1],
                abs[f * fd + 3 * wrist + 2],
            ]
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn audio_energy_tracks_wrist_speed() {
    let (sk, clips) = corpus(24, 7);
    let spf = SAMPLE_RATE as f64 / FRAME_RATE;
    let (mut energy, mut speed) = (Vec::new(), Vec::new());
    for clip in &clips {
        for &arm in [sk.left_arm(), sk.right_arm()].iter() {
            let track = wrist_track(&sk, clip, *arm.last().unwrap());
            for f in 1..clip.n_frames {
                let (s0, s1) = (
                    (f as f64 * spf) as usize,
                    (((f + 1) as f64 * spf) as usize).min(clip.audio.len()),
                );
                let rms = (clip.audio[s0..s1].iter().map(|v| v * v).sum::<f64>()
                    / (s1 - s0) as f64)
                    .sqrt();
                let d: f64 = (0..3)
                    .map(|a| (track[f][a] - track[f - 1][a]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                energy.push(rms);
                speed.push(d);
            }
        }
    }
    let r = pearson(&energy, &speed);
    assert!(r > 0.3, "energy/speed correlation {r}");
}

#[test]
fn speakers_differ_in_motion_amplitude() {
    let (sk, clips) = corpus(16, 9);
    let wrist = *sk.left_arm().last().unwrap();
    let spread = |c: &GestureClip| {
        let xs: Vec<f64> = wrist_track(&sk, c, wrist).iter().map(|p| p[0]).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
    };
    let by = |s: usize| {
        clips
            .iter()
            .filter(|c| c.speaker == s)
            .map(spread)
            .collect::<Vec<_>>()
    };
    let (a, b) = (by(0), by(1));
    let max_a = a.iter().cloned().fold(f64::MIN, f64::max);
    let min_b = b.iter().cloned().fold(f64::MAX, f64::min);
    assert!(
        min_b > max_a,
        "speaker 0 up to {max_a}, speaker 1 from {min_b}"
    );
}

#[test]
fn generation_is_byte_identical_per_seed() {
    let sk = Skeleton::upper11();
    let cfg = CorpusConfig {
        clips: 4,
        ..Default::default()
    };
    let a = corpus_to_string(&generate_corpus(&cfg, &sk, 3).unwrap());
    let b = corpus_to_string(&generate_corpus(&cfg, &sk, 3).unwrap());
    let c = corpus_to_string(&generate_corpus(&cfg, &sk, 4).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(corpus_to_string(&corpus_from_str(&a).unwrap()), a);
}

fn random_tree() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    (3usize..12)
        .prop_flat_map(|j| {
            let parents = (1..j).map(|i| (0..i).boxed()).collect::<Vec<_>>();
            (parents, prop::collection::vec(-2.0f64..2.0, 2 * 3 * j))
        })
        .prop_map(|(mut p, rel)| {
            p.insert(0, 0);
            (p, rel)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kinematics_round_trip((parents, rel) in random_tree()) {
        let j = parents.len();
        let names = (0..j).map(|i| format!("j{i}")).collect();
        let sk = Skeleton::new(names, parents, vec![[0.0; 3]; j], vec![1], vec![2]).unwrap();
        let abs = sk.rel_to_abs(&rel).unwrap();
        let back = sk.abs_to_rel(&abs).unwrap();
        for (a, b) in rel.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn sot_filter_is_idempotent_and_order_preserving(seed in 0u64..50, tau in 0.0f64..1.0) {
        let sk = Skeleton::upper11();
        let cfg = CorpusConfig { clips: 6, bad_clip_rate: 0.5, ..Default::default() };
        let clips = generate_corpus(&cfg, &sk, seed).unwrap().clips;
        let once = filter_sot(&clips, tau);
        prop_assert_eq!(&filter_sot(&once, tau), &once);
        let ids: Vec<&str> = clips.iter().map(|c| c.id.as_str()).filter(|id| once.iter().any(|k| k.id == *id)).collect();
        prop_assert_eq!(ids, once.iter().map(|c| c.id.as_str()).collect::<Vec<_>>());
    }
}

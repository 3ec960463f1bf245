use aqgt_core::aligner::{fuse_window_sequence, TemporalAligner};
use aqgt_core::config::{AlignerConfig, SeqConfig, VqConfig};
use aqgt_core::modalities::{assemble_input, speaker_sample, InputParts};
use aqgt_core::numerics::Bound;
use aqgt_core::seqmodel::{select_heads, GruTransformer};
use aqgt_core::{ParamStore, Tape, Tensor, VqVae2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn head_rule_matches_exhaustive_search() {
    for n in 1..=512 {
        let want = (1..=12).filter(|h| n % h == 0).max().unwrap();
        assert_eq!(select_heads(n, 12), want, "n_i = {n}");
    }
}

#[test]
fn constant_windows_fuse_to_the_constant() {
    let tape = Tape::new();
    for c in [0.1, -7.3, 1e-9, 123.456] {
        let w = tape.constant(Tensor::full(&[2, 5, 4, 3], c));
        let g = fuse_window_sequence(w).unwrap();
        assert!(g.value().data().iter().all(|&v| v == c));
    }
}

#[test]
fn aligner_output_is_causal_up_to_one_step() {
    let (w_dim, frame_dim, m) = (5, 3, 7);
    let vq_cfg = VqConfig {
        window: 4,
        hidden: 8,
        latent_dim: 2,
        bottom_positions: 2,
        codebook_size: 4,
        alpha: 0.25,
    };
    let mut vq = VqVae2::new(&vq_cfg, 4 * frame_dim, 1);
    vq.freeze();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = AlignerConfig {
        fc_dim: 6,
        hidden: 8,
        quantize_latents: false,
        ..AlignerConfig::default()
    };
    let aligner = TemporalAligner::new(
        &mut store,
        "a",
        &cfg,
        w_dim,
        frame_dim,
        vq_cfg.latent_width(),
        &mut rng,
    );
    let base = random(&mut rng, &[1, m, w_dim]);
    let run = |w: &Tensor| {
        let tape = Tape::inference();
        let p = Bound::frozen(&tape, &store);
        let pv = Bound::frozen(&tape, &vq.params);
        let out = aligner
            .synthesize_sequence(&p, &vq, &pv, tape.constant(w.clone()))
            .unwrap();
        (*out.frames.value()).clone()
    };
    let reference = run(&base);
    for k in 1..m {
        let mut moved = base.clone();
        moved.data_mut()[k * w_dim..(k + 1) * w_dim]
            .iter_mut()
            .for_each(|v| *v += 0.5);
        let out = run(&moved);
        for t in 0..m {
            let row = |x: &Tensor| x.data()[t * frame_dim..(t + 1) * frame_dim].to_vec();
            if t + 1 < k {
                assert_eq!(
                    row(&out),
                    row(&reference),
                    "frame {t} moved when W_{k} changed"
                );
            }
        }
        let prev = |x: &Tensor| x.data()[(k - 1) * frame_dim..k * frame_dim].to_vec();
        assert_ne!(
            prev(&out),
            prev(&reference),
            "frame {} should see W_{k}",
            k - 1
        );
    }
}

#[test]
fn frozen_vq_receives_no_gradient_through_the_aligner() {
    let vq_cfg = VqConfig {
        window: 4,
        hidden: 8,
        latent_dim: 2,
        bottom_positions: 2,
        codebook_size: 4,
        alpha: 0.25,
    };
    let mut vq = VqVae2::new(&vq_cfg, 12, 1);
    vq.freeze();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let aligner = TemporalAligner::new(
        &mut store,
        "a",
        &AlignerConfig::default(),
        5,
        3,
        vq_cfg.latent_width(),
        &mut rng,
    );
    let w = random(&mut rng, &[2, 4, 5]);
    let tape = Tape::new();
    let p = Bound::new(&tape, &store, true);
    let pv = Bound::frozen(&tape, &vq.params);
    let out = aligner
        .synthesize_sequence(&p, &vq, &pv, tape.constant(w))
        .unwrap();
    let grads = tape.backward(out.frames.square().sum()).unwrap();
    assert!(pv
        .grads(&grads)
        .iter()
        .all(|(_, g)| g.data().iter().all(|v| *v == 0.0)));
    assert!(p
        .grads(&grads)
        .iter()
        .any(|(_, g)| g.data().iter().any(|v| *v != 0.0)));
}

#[test]
fn ablated_sequence_models_keep_only_remaining_blocks() {
    let dim = 12;
    let full = GruTransformer::new(dim, &SeqConfig::default(), 0);
    let no_gru = GruTransformer::new(
        dim,
        &SeqConfig {
            use_gru: false,
            ..SeqConfig::default()
        },
        0,
    );
    let no_tf = GruTransformer::new(
        dim,
        &SeqConfig {
            use_transformer: false,
            ..SeqConfig::default()
        },
        0,
    );
    let count = |m: &GruTransformer, prefix: &str| m.params.numel_with_prefix(prefix);
    assert_eq!(
        no_gru.params.numel(),
        full.params.numel() - count(&full, "gt.gru")
    );
    assert_eq!(
        no_tf.params.numel(),
        full.params.numel() - count(&full, "gt.tb")
    );
    let tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 3, dim], 0.2));
    for m in [&full, &no_gru, &no_tf] {
        let p = Bound::frozen(&tape, &m.params);
        let a = (*m.forward(&p, x).unwrap().value()).clone();
        let b = (*m.forward(&p, x).unwrap().value()).clone();
        assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn assembled_input_slices_back_to_its_parts(seed in any::<u64>(), b in 1usize..3, l in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let parts = InputParts {
            gesture: tape.constant(random(&mut rng, &[b, l, 4])),
            text: tape.constant(random(&mut rng, &[b, 3])),
            audio_latents: tape.constant(random(&mut rng, &[b, l, 2])),
            onset: tape.constant(random(&mut rng, &[b, l, 1])),
            filterbank: tape.constant(random(&mut rng, &[b, l, 3])),
            style: tape.constant(random(&mut rng, &[b, 2])),
        };
        let (fused, layout) = assemble_input(&parts).unwrap();
        prop_assert_eq!(layout.width(), fused.shape()[2]);
        let framewise = [
            ("gesture", parts.gesture),
            ("audio_latents", parts.audio_latents),
            ("onset", parts.onset),
            ("filterbank", parts.filterbank),
        ];
        for (name, v) in framewise {
            let seg = layout.get(name).unwrap();
            prop_assert_eq!(&*fused.slice(2, seg.start, seg.len).unwrap().value(), &*v.value());
        }
        for (name, v) in [("text", parts.text), ("style", parts.style)] {
            let seg = layout.get(name).unwrap();
            let got = fused.slice(2, seg.start, seg.len).unwrap().select(1, l - 1).unwrap();
            prop_assert_eq!(&*got.value(), &*v.value());
        }
    }

    #[test]
    fn speaker_sample_is_reproducible(mu in prop::collection::vec(-1.0f64..1.0, 4), lv in prop::collection::vec(-1.0f64..1.0, 4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = random(&mut rng, &[2, 2]);
        let tape = Tape::new();
        let t = |v: &[f64]| tape.constant(Tensor::new(vec![2, 2], v.to_vec()).unwrap());
        let a = speaker_sample(t(&mu), t(&lv), &noise).unwrap();
        let b = speaker_sample(t(&mu), t(&lv), &noise).unwrap();
        prop_assert_eq!(&*a.value(), &*b.value());
        for i in 0..4 {
            let want = mu[i] + (0.5 * lv[i]).exp() * noise.data()[i];
            prop_assert!((a.value().data()[i] - want).abs() <= 1e-12);
        }
    }
}

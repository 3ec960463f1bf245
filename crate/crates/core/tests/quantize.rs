use aqgt_core::config::VqConfig;
use aqgt_core::numerics::{Bound, Tape, Tensor};
use aqgt_core::quantize::{codebook_perplexity, nearest_indices, vq_loss_terms, VqVae2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_force(entries: &Tensor, queries: &Tensor) -> Vec<usize> {
    let (c, d) = (entries.shape()[0], entries.shape()[1]);
    (0..queries.shape()[0])
        .map(|q| {
            let row = &queries.data()[q * d..(q + 1) * d];
            let mut best = (f64::INFINITY, 0);
            for e in 0..c {
                let dist: f64 = row
                    .iter()
                    .zip(&entries.data()[e * d..(e + 1) * d])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                if dist < best.0 {
                    best = (dist, e);
                }
            }
            best.1
        })
        .collect()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn exhaustive_search_agrees_on_full_size_codebook() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let entries = random(&mut rng, &[512, 32]);
    let queries = random(&mut rng, &[10_000, 32]);
    let got = nearest_indices(&entries, &queries).unwrap();
    let want = brute_force(&entries, &queries);
    let mismatches = got.iter().zip(&want).filter(|(a, b)| a != b).count();
    assert_eq!(mismatches, 0);
}

fn vq() -> VqVae2 {
    let cfg = VqConfig {
        window: 2,
        hidden: 6,
        latent_dim: 2,
        bottom_positions: 2,
        codebook_size: 8,
        alpha: 0.25,
    };
    VqVae2::new(&cfg, 6, 3)
}

#[test]
fn loss_terms_route_gradients_to_their_owners() {
    let vq = vq();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[4, 6]);
    let term_grads = |pick: usize| {
        let tape = Tape::new();
        let p = Bound::new(&tape, &vq.params, true);
        let out = vq.forward(&p, tape.constant(x.clone())).unwrap();
        let t = out.loss(tape.constant(x.clone()), vq.config.alpha).unwrap();
        let loss = [t.reconstruction, t.codebook, t.commitment][pick];
        let grads = tape.backward(loss).unwrap();
        p.grads(&grads)
            .into_iter()
            .map(|(id, g)| {
                (
                    vq.params.name(id).to_string(),
                    g.data().iter().any(|v| *v != 0.0),
                )
            })
            .collect::<Vec<_>>()
    };
    let touched = |pick: usize, prefix: &str| {
        term_grads(pick)
            .iter()
            .any(|(n, nz)| n.starts_with(prefix) && *nz)
    };
    assert!(touched(0, "enc_") && touched(0, "dec"));
    assert!(!touched(0, "codebook"));
    assert!(touched(1, "codebook") && !touched(1, "enc_") && !touched(1, "dec"));
    assert!(touched(2, "enc_") && !touched(2, "codebook") && !touched(2, "dec"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nearest_matches_brute_force(c in 1usize..24, d in 1usize..6, n in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = random(&mut rng, &[c, d]);
        if c > 2 {
            let dup: Vec<f64> = entries.data()[..d].to_vec();
            entries.data_mut()[2 * d..3 * d].copy_from_slice(&dup);
        }
        let queries = random(&mut rng, &[n, d]);
        prop_assert_eq!(nearest_indices(&entries, &queries).unwrap(), brute_force(&entries, &queries));
    }

    #[test]
    fn vq_loss_vanishes_exactly_at_identity(seed in any::<u64>(), which in 0usize..2, delta in 1e-3f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 5]);
        let z = random(&mut rng, &[3, 2, 4]);
        let tape = Tape::new();
        let (xv, zv) = (tape.leaf(x.clone()), tape.leaf(z.clone()));
        let zero = vq_loss_terms(xv, xv, zv, zv, 0.25).unwrap();
        prop_assert_eq!(zero.total.item(), 0.0);
        let mut moved = if which == 0 { x.clone() } else { z.clone() };
        moved.data_mut()[0] += delta;
        let mv = tape.leaf(moved);
        let t = if which == 0 {
            vq_loss_terms(xv, mv, zv, zv, 0.25).unwrap()
        } else {
            vq_loss_terms(xv, xv, zv, mv, 0.25).unwrap()
        };
        prop_assert!(t.total.item() > 0.0);
        for term in [t.reconstruction, t.codebook, t.commitment] {
            prop_assert!(term.item() >= 0.0);
        }
    }

    #[test]
    fn perplexity_lies_between_one_and_size(counts in prop::collection::vec(0u64..50, 2..40)) {
        prop_assume!(counts.iter().filter(|&&c| c > 0).count() >= 2);
        let p = codebook_perplexity(&counts).unwrap();
        prop_assert!(p > 1.0);
        prop_assert!(p <= counts.len() as f64 + 1e-9);
        if counts.contains(&0) {
            prop_assert!(p < counts.len() as f64);
        }
    }
}

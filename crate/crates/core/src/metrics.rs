//! Objective evaluation: Fréchet Gesture Distance, Diversity and MAJE, plus
//! the frozen autoencoder that embeds gestures for the first two.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Skeleton;
use crate::error::{Error, Result};
use crate::numerics::{Activation, Adam, Bound, Mlp, ParamStore, Tape, Tensor};

/// Eigenvalues above this are clipped to zero silently.
pub const EIG_CLIP: f64 = -1e-8;
/// Eigenvalues below this reject the covariance as not positive semi-definite.
pub const EIG_REJECT: f64 = -1e-6;

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// Row-major `d × d`, unbiased.
    pub cov: Vec<f64>,
    pub dim: usize,
}

impl GaussianSummary {
    /// Summary of `[n, d]` features, `n ≥ 2`.
    pub fn from_features(features: &Tensor) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::shape(
                "gaussian_summary",
                format!("expected [n, d], got {:?}", features.shape()),
            ));
        }
        let (n, d) = (features.shape()[0], features.shape()[1]);
        if n < 2 {
            return Err(Error::domain(
                "gaussian_summary",
                format!("need at least 2 samples, got {n}"),
            ));
        }
        let x = features.data();
        let mut mean = vec![0.0; d];
        for row in x.chunks_exact(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for row in x.chunks_exact(d) {
            for i in 0..d {
                let di = row[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (row[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(GaussianSummary { mean, cov, dim: d })
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.cov)
    }
}

fn checked_eigenvalues(values: impl Iterator<Item = f64>, what: &str) -> Result<Vec<f64>> {
    values
        .map(|v| {
            if v < EIG_REJECT {
                Err(Error::domain(
                    "fgd",
                    format!("{what} has eigenvalue {v:e}; not positive semi-definite"),
                ))
            } else {
                if v < EIG_CLIP {
                    log::warn!("{what}: eigenvalue {v:e} clipped to 0");
                }
                Ok(v.max(0.0))
            }
        })
        .collect()
}

fn sym_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = checked_eigenvalues(eig.eigenvalues.iter().copied(), what)?;
    let root = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        vals.len(),
        vals.iter().map(|v| v.sqrt()),
    ));
    Ok(&eig.eigenvectors * root * eig.eigenvectors.transpose())
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`.
///
/// The trace of the cross term is taken from the eigenvalues of the
/// symmetric `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`, which shares them with `Σ₁Σ₂`.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::shape(
            "fgd",
            format!("feature dims {} and {}", a.dim, b.dim),
        ));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let (s1, s2) = (a.matrix(), b.matrix());
    let root1 = sym_sqrt(&s1, "first covariance")?;
    let inner = &root1 * &s2 * &root1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = checked_eigenvalues(
        SymmetricEigen::new(inner).eigenvalues.iter().copied(),
        "covariance product",
    )?
    .iter()
    .map(|v| v.sqrt())
    .sum();
    let value = mean_term + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Fréchet distance between Gaussian fits of two `[n, d]` feature sets.
pub fn fgd(features_real: &Tensor, features_gen: &Tensor) -> Result<f64> {
    frechet_distance(
        &GaussianSummary::from_features(features_real)?,
        &GaussianSummary::from_features(features_gen)?,
    )
}

fn check_features(op: &'static str, features: &Tensor) -> Result<(usize, usize)> {
    if features.rank() != 2 {
        return Err(Error::shape(
            op,
            format!("expected [n, d], got {:?}", features.shape()),
        ));
    }
    let n = features.shape()[0];
    if n < 2 {
        return Err(Error::domain(
            op,
            format!("need at least 2 samples, got {n}"),
        ));
    }
    Ok((n, features.shape()[1]))
}

/// Mean L1 distance of each repeat's disjoint random pairs.
pub fn diversity_samples(
    features: &Tensor,
    pair_count: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (n, d) = check_features("diversity", features)?;
    if pair_count == 0 || repeats == 0 {
        return Err(Error::domain(
            "diversity",
            "pair_count and repeats must be positive",
        ));
    }
    let pairs = pair_count.min(n / 2);
    let x = features.data();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    Ok((0..repeats)
        .map(|_| {
            order.shuffle(&mut rng);
            let total: f64 = order[..2 * pairs]
                .chunks_exact(2)
                .map(|p| {
                    let (a, b) = (&x[p[0] * d..(p[0] + 1) * d], &x[p[1] * d..(p[1] + 1) * d]);
                    a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum::<f64>()
                })
                .sum();
            total / pairs as f64
        })
        .collect())
}

/// Average over `repeats` draws of the mean L1 distance between
/// `pair_count` disjoint random pairs (fewer when the set is small).
pub fn diversity(features: &Tensor, pair_count: usize, repeats: usize, seed: u64) -> Result<f64> {
    let s = diversity_samples(features, pair_count, repeats, seed)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Mean absolute error over frames, joints and axes.
pub fn maje(abs_real: &Tensor, abs_gen: &Tensor) -> Result<f64> {
    if abs_real.shape() != abs_gen.shape() || abs_real.numel() == 0 {
        return Err(Error::shape(
            "maje",
            format!("{:?} vs {:?}", abs_real.shape(), abs_gen.shape()),
        ));
    }
    let sum: f64 = abs_real
        .data()
        .iter()
        .zip(abs_gen.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / abs_real.numel() as f64)
}

/// `[F, 3J]` relative frames to absolute positions.
pub fn to_absolute(skeleton: &Skeleton, rel: &Tensor) -> Result<Tensor> {
    let fd = skeleton.frame_dim();
    if rel.rank() != 2 || rel.shape()[1] != fd {
        return Err(Error::shape(
            "to_absolute",
            format!("expected [frames, {fd}], got {:?}", rel.shape()),
        ));
    }
    let mut data = Vec::with_capacity(rel.numel());
    for frame in rel.data().chunks_exact(fd) {
        data.extend(skeleton.rel_to_abs(frame)?);
    }
    Tensor::new(rel.shape().to_vec(), data)
}

/// Settings of the gesture feature autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    /// Frames per embedded sub-window.
    pub window: usize,
    pub stride: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            window: 8,
            stride: 4,
            hidden: 64,
            feature_dim: 32,
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

/// Autoencoder over absolute-coordinate sub-windows; only the encoder is
/// used once trained.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub config: ExtractorConfig,
    pub frame_dim: usize,
    pub seed: u64,
    pub params: ParamStore,
    encoder: Mlp,
    decoder: Mlp,
}

/// Serialized extractor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtractorFile {
    pub config: ExtractorConfig,
    pub frame_dim: usize,
    pub seed: u64,
    pub hash: String,
    pub params: std::collections::BTreeMap<String, Tensor>,
}

impl FeatureExtractor {
    pub fn new(config: &ExtractorConfig, frame_dim: usize, seed: u64) -> Result<Self> {
        if config.window == 0
            || config.stride == 0
            || config.feature_dim == 0
            || config.batch_size == 0
        {
            return Err(Error::config(
                "extractor",
                "window, stride, feature_dim and batch_size must be positive",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let input = config.window * frame_dim;
        let encoder = Mlp::new(
            &mut params,
            "fe_enc",
            &[input, config.hidden, config.feature_dim],
            Activation::Tanh,
            &mut rng,
        );
        let decoder = Mlp::new(
            &mut params,
            "fe_dec",
            &[config.feature_dim, config.hidden, input],
            Activation::Tanh,
            &mut rng,
        );
        Ok(FeatureExtractor {
            config: config.clone(),
            frame_dim,
            seed,
            params,
            encoder,
            decoder,
        })
    }

    /// Sub-windows of `[F, frame_dim]` sequences, `[n, window·frame_dim]`.
    pub fn windows(&self, sequences: &[Tensor]) -> Result<Tensor> {
        let (w, fd) = (self.config.window, self.frame_dim);
        let mut data = Vec::new();
        for s in sequences {
            if s.rank() != 2 || s.shape()[1] != fd {
                return Err(Error::shape(
                    "feature_windows",
                    format!("expected [frames, {fd}], got {:?}", s.shape()),
                ));
            }
            let f = s.shape()[0];
            let mut start = 0;
            while start + w <= f {
                data.extend_from_slice(&s.data()[start * fd..(start + w) * fd]);
                start += self.config.stride;
            }
        }
        if data.is_empty() {
            return Err(Error::domain(
                "feature_windows",
                format!("no sequence holds {w} frames"),
            ));
        }
        Tensor::new(vec![data.len() / (w * fd), w * fd], data)
    }

    /// Fits the autoencoder on ground-truth absolute sequences; returns the
    /// per-epoch mean reconstruction error.
    pub fn train(&mut self, sequences: &[Tensor]) -> Result<Vec<f64>> {
        let x = self.windows(sequences)?;
        let (n, width) = (x.shape()[0], x.shape()[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xfea7);
        let mut opt = Adam::new(&self.params);
        let mut history = Vec::with_capacity(self.config.epochs);
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let mut rows = Vec::with_capacity(chunk.len() * width);
                for &i in chunk {
                    rows.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
                }
                let batch = Tensor::new(vec![chunk.len(), width], rows)?;
                let tape = Tape::new();
                let p = Bound::new(&tape, &self.params, true);
                let input = tape.constant(batch);
                let recon = self.decoder.forward(&p, self.encoder.forward(&p, input)?)?;
                let loss = recon.sub(input)?.square().mean();
                sum += loss.item() * chunk.len() as f64;
                let grads = p.grads(&tape.backward(loss)?);
                drop(p);
                opt.update(&mut self.params, &grads, self.config.lr)?;
            }
            history.push(sum / n as f64);
        }
        Ok(history)
    }

    /// Encoder outputs for every sub-window, `[n, feature_dim]`.
    pub fn features(&self, sequences: &[Tensor]) -> Result<Tensor> {
        let x = self.windows(sequences)?;
        let tape = Tape::inference();
        let p = Bound::frozen(&tape, &self.params);
        let f = self.encoder.forward(&p, tape.constant(x))?;
        Ok((*f.value()).clone())
    }

    /// Digest of configuration, seed and weights.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(
            serde_json::to_string(&self.config)
                .expect("config serializes")
                .as_bytes(),
        );
        h.update(self.frame_dim.to_le_bytes());
        h.update(self.seed.to_le_bytes());
        for t in self.params.values() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn to_file(&self) -> ExtractorFile {
        ExtractorFile {
            config: self.config.clone(),
            frame_dim: self.frame_dim,
            seed: self.seed,
            hash: self.hash(),
            params: self.params.snapshot(),
        }
    }

    /// Rebuilds an extractor and verifies its recorded hash.
    pub fn from_file(file: &ExtractorFile) -> Result<Self> {
        let mut fe = FeatureExtractor::new(&file.config, file.frame_dim, file.seed)?;
        fe.params.load_snapshot(&file.params)?;
        let actual = fe.hash();
        if actual != file.hash {
            return Err(Error::Checksum {
                expected: file.hash.clone(),
                actual,
            });
        }
        Ok(fe)
    }
}

/// Machine-readable result of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fgd: f64,
    pub diversity: f64,
    pub maje: f64,
    pub extractor_hash: String,
    pub seed: u64,
}

impl MetricReport {
    /// Errors unless both reports embed gestures with the same extractor.
    pub fn check_comparable(&self, other: &MetricReport) -> Result<()> {
        if self.extractor_hash != other.extractor_hash {
            return Err(Error::Contract(format!(
                "metrics from different feature extractors ({} vs {})",
                self.extractor_hash, other.extractor_hash
            )));
        }
        Ok(())
    }
}

/// Settings of [`evaluate_sequences`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pair_count: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pair_count: 500,
            repeats: 1000,
            seed: 0,
        }
    }
}

/// FGD and Diversity on extractor features plus MAJE on positions, for
/// paired absolute-coordinate sequences.
pub fn evaluate_sequences(
    extractor: &FeatureExtractor,
    real_abs: &[Tensor],
    gen_abs: &[Tensor],
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if real_abs.len() != gen_abs.len() || real_abs.is_empty() {
        return Err(Error::shape(
            "evaluate",
            format!(
                "{} real vs {} generated sequences",
                real_abs.len(),
                gen_abs.len()
            ),
        ));
    }
    let f_real = extractor.features(real_abs)?;
    let f_gen = extractor.features(gen_abs)?;
    let mut errors = 0.0;
    let mut count = 0usize;
    for (r, g) in real_abs.iter().zip(gen_abs) {
        errors += maje(r, g)? * r.numel() as f64;
        count += r.numel();
    }
    Ok(MetricReport {
        fgd: fgd(&f_real, &f_gen)?,
        diversity: diversity(&f_gen, cfg.pair_count, cfg.repeats, cfg.seed)?,
        maje: errors / count as f64,
        extractor_hash: extractor.hash(),
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, shift: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .map(|v: f64| v + shift)
            .collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn fgd_of_identical_sets_is_zero() {
        let x = gaussian(200, 4, 0.0, 1);
        assert!(fgd(&x, &x).unwrap() <= 1e-6);
    }

    #[test]
    fn closed_form_mean_shift() {
        let a = GaussianSummary {
            mean: vec![0.0, 0.0],
            cov: vec![1.0, 0.0, 0.0, 1.0],
            dim: 2,
        };
        let b = GaussianSummary {
            mean: vec![3.0, 0.0],
            cov: vec![1.0, 0.0, 0.0, 1.0],
            dim: 2,
        };
        assert!((frechet_distance(&a, &b).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_covariances() {
        // Tr(S1 + S2 - 2 sqrt(S1 S2)) = sum (sqrt(a) - sqrt(b))^2 for diagonal S1, S2
        let a = GaussianSummary {
            mean: vec![0.0; 2],
            cov: vec![4.0, 0.0, 0.0, 1.0],
            dim: 2,
        };
        let b = GaussianSummary {
            mean: vec![0.0; 2],
            cov: vec![1.0, 0.0, 0.0, 9.0],
            dim: 2,
        };
        assert!((frechet_distance(&a, &b).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn severe_negative_eigenvalue_rejected() {
        let a = GaussianSummary {
            mean: vec![0.0; 2],
            cov: vec![1.0, 0.0, 0.0, -0.1],
            dim: 2,
        };
        assert!(frechet_distance(&a, &a).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(fgd(&gaussian(10, 2, 0.0, 1), &gaussian(10, 3, 0.0, 2)).is_err());
    }

    #[test]
    fn diversity_two_clusters() {
        let mut data = vec![0.0; 200 * 2];
        for r in 100..200 {
            data[r * 2] = 3.0;
            data[r * 2 + 1] = 1.0;
        }
        let x = Tensor::new(vec![200, 2], data).unwrap();
        let v = diversity(&x, 50, 1000, 4).unwrap();
        // cross-pair probability 100/199 for disjoint pairs
        let expected = 4.0 * 100.0 / 199.0;
        assert!((v - expected).abs() < 0.05, "{v} vs {expected}");
    }

    #[test]
    fn diversity_needs_two_samples() {
        assert!(diversity(&Tensor::zeros(&[1, 3]), 10, 10, 0).is_err());
    }

    #[test]
    fn maje_hand_case() {
        let a = Tensor::new(
            vec![2, 6],
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        let b = Tensor::new(
            vec![2, 6],
            vec![0.5, 1.0, 1.0, 3.0, 4.0, 6.0, 1.0, 0.0, 1.0, 1.0, 3.0, 1.0],
        )
        .unwrap();
        // |diffs| = 0.5, 0, 1, 0, 0, 1, 0, 1, 0, 0, 2, 0 -> 5.5 / 12
        assert!((maje(&a, &b).unwrap() - 5.5 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn extractor_round_trip_and_hash() {
        let sk = Skeleton::upper11();
        let seqs = vec![
            gaussian(20, sk.frame_dim(), 0.0, 3),
            gaussian(16, sk.frame_dim(), 0.5, 4),
        ];
        let cfg = ExtractorConfig {
            epochs: 3,
            ..Default::default()
        };
        let mut fe = FeatureExtractor::new(&cfg, sk.frame_dim(), 9).unwrap();
        let hist = fe.train(&seqs).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
        let file = fe.to_file();
        let back = FeatureExtractor::from_file(&file).unwrap();
        assert_eq!(back.hash(), fe.hash());
        assert_eq!(back.features(&seqs).unwrap(), fe.features(&seqs).unwrap());
        let mut tampered = file.clone();
        tampered.params.values_mut().next().unwrap().data_mut()[0] += 1e-3;
        assert!(matches!(
            FeatureExtractor::from_file(&tampered),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn reports_from_different_extractors_are_not_comparable() {
        let a = MetricReport {
            fgd: 1.0,
            diversity: 2.0,
            maje: 0.1,
            extractor_hash: "aa".into(),
            seed: 0,
        };
        let b = MetricReport {
            extractor_hash: "bb".into(),
            ..a.clone()
        };
        assert!(a.check_comparable(&a).is_ok());
        assert!(a.check_comparable(&b).is_err());
    }
}

//! Synthetic multi-domain, multi-modal classification data.
//!
//! Every sample draws a class `y` uniformly and a latent
//! `z = mu_y + N(0, I)`. Modality `k` in domain `d` observes
//!
//! ```text
//! x_k = snr_k * R_{d,k} (A_k z) + shift_{d,k} + N(0, noise_std_k^2)
//! ```
//!
//! where `A_k` is a fixed random projection shared by all domains,
//! `R_{d,k}` a domain-specific orthogonal rotation and `shift_{d,k}` a
//! domain-specific mean offset. The per-modality `snr` controls which
//! modality dominates; `rotation_strength` and `shift_scale` control how much
//! each modality moves between domains.
//!
//! Class centroids are the scaled one-hot corners of the probability
//! simplex, expressed in the `(C - 1)`-dimensional plane of that simplex and
//! zero-padded to `latent_dim`, so any two centroids are
//! `centroid_scale * sqrt(2)` apart regardless of the seed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, ChaCha8Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DataGenConfig {
    pub num_domains: usize,
    pub num_classes: usize,
    pub latent_dim: usize,
    /// One entry per modality.
    pub input_dims: Vec<usize>,
    pub snr: Vec<f64>,
    pub noise_std: Vec<f64>,
    /// Largest Givens angle (radians) of the per-domain rotations.
    pub rotation_strength: Vec<f64>,
    /// Standard deviation of each coordinate of the per-domain mean shift.
    pub shift_scale: Vec<f64>,
    pub centroid_scale: f64,
    pub train_per_domain: usize,
    pub val_per_domain: usize,
    pub test_per_domain: usize,
    pub seed: u64,
}

impl DataGenConfig {
    pub fn modalities(&self) -> usize {
        self.input_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.modalities();
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("data: {msg}")));
        if m == 0 {
            return bad("at least one modality is required");
        }
        for (name, len) in [
            ("snr", self.snr.len()),
            ("noise_std", self.noise_std.len()),
            ("rotation_strength", self.rotation_strength.len()),
            ("shift_scale", self.shift_scale.len()),
        ] {
            if len != m {
                return Err(Error::InvalidConfig(format!(
                    "data: {name} has {len} entries for {m} modalities"
                )));
            }
        }
        if self.num_domains == 0 || self.num_classes < 2 {
            return bad("need at least one domain and two classes");
        }
        if self.latent_dim + 1 < self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "data: latent_dim {} cannot hold a simplex of {} class centroids",
                self.latent_dim, self.num_classes
            )));
        }
        if self.input_dims.contains(&0) {
            return bad("input dims must be positive");
        }
        if self.train_per_domain == 0 || self.val_per_domain == 0 || self.test_per_domain == 0 {
            return bad("split sizes must be positive");
        }
        if self.snr.iter().any(|&s| !(s >= 0.0)) {
            return bad("snr must be non-negative");
        }
        if self.noise_std.iter().any(|&s| !(s > 0.0)) {
            return bad("noise_std must be positive");
        }
        if self
            .rotation_strength
            .iter()
            .chain(&self.shift_scale)
            .any(|&s| !(s >= 0.0))
        {
            return bad("rotation_strength and shift_scale must be non-negative");
        }
        if !(self.centroid_scale * math::sqrt(2.0) >= 2.0) {
            return bad("centroid_scale must keep class centroids at least 2 apart");
        }
        Ok(())
    }
}

/// Aligned per-modality feature matrices and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalBatch {
    pub modalities: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl MultiModalBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn select(&self, idx: &[usize]) -> Result<MultiModalBatch> {
        if idx.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(MultiModalBatch {
            modalities: self
                .modalities
                .iter()
                .map(|x| x.gather_rows(idx))
                .collect::<Result<_>>()?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Row-wise concatenation of batches with the same modality layout.
    pub fn concat(parts: &[&MultiModalBatch]) -> Result<MultiModalBatch> {
        let first = parts.first().ok_or(Error::EmptyBatch)?;
        let m = first.num_modalities();
        let mut modalities = Vec::with_capacity(m);
        for k in 0..m {
            let blocks: Vec<&Tensor> = parts.iter().map(|p| &p.modalities[k]).collect();
            modalities.push(Tensor::vstack(&blocks)?);
        }
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Ok(MultiModalBatch { modalities, labels })
    }

    /// Content hash of row `i` (label and every feature bit pattern).
    pub fn row_hash(&self, i: usize) -> u64 {
        let mut h = Fnv1a::new();
        h.write(&(self.labels[i] as u64).to_le_bytes());
        for x in &self.modalities {
            for v in x.row(i) {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Order-sensitive hash of one modality's values.
    pub fn modality_checksum(&self, k: usize) -> u64 {
        let mut h = Fnv1a::new();
        for v in self.modalities[k].data() {
            h.write(&v.to_bits().to_le_bytes());
        }
        h.finish()
    }
}

struct Fnv1a(u64);

impl Fnv1a {
    fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// Per-domain transformation of each modality.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub domain_id: usize,
    /// `R_{d,k}`, square orthogonal, one per modality.
    pub rotations: Vec<Tensor>,
    pub mean_shifts: Vec<Vec<f64>>,
    pub noise_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub spec: DomainSpec,
    pub train: MultiModalBatch,
    pub val: MultiModalBatch,
    pub test: MultiModalBatch,
}

impl DomainData {
    /// All rows of the domain: train, then val, then test.
    pub fn full(&self) -> Result<MultiModalBatch> {
        MultiModalBatch::concat(&[&self.train, &self.val, &self.test])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalDataset {
    pub config: DataGenConfig,
    pub centroids: Vec<Vec<f64>>,
    /// `A_k`, `input_dim_k x latent_dim`.
    pub projections: Vec<Tensor>,
    pub domains: Vec<DomainData>,
}

impl MultiModalDataset {
    pub fn domain(&self, id: usize) -> Result<&DomainData> {
        self.domains.get(id).ok_or(Error::UnknownDomain { id })
    }
}

/// Seed of domain `d`'s stream: the master seed mixed with `d`.
pub fn domain_seed(seed: u64, domain: usize) -> u64 {
    rng::derive_seed(seed, 1000 + domain as u64)
}

fn projection_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, 999)
}

/// Class centroids: `scale * e_c` for the one-hot corners, centered and
/// written in an orthonormal (Helmert) basis of the simplex plane.
pub fn class_centroids(classes: usize, latent_dim: usize, scale: f64) -> Vec<Vec<f64>> {
    // Helmert basis vectors h_j (j = 1..C-1) are orthonormal and orthogonal
    // to the all-ones vector.
    let mut basis = Vec::with_capacity(classes - 1);
    for j in 1..classes {
        let norm = math::sqrt((j * (j + 1)) as f64);
        let mut h = vec![0.0; classes];
        for hi in h.iter_mut().take(j) {
            *hi = 1.0 / norm;
        }
        h[j] = -(j as f64) / norm;
        basis.push(h);
    }
    (0..classes)
        .map(|cls| {
            let mut mu = vec![0.0; latent_dim];
            for (j, h) in basis.iter().enumerate() {
                // <scale * (e_cls - 1/C), h_j> = scale * h_j[cls], since h_j is
                // orthogonal to the ones vector.
                mu[j] = scale * h[cls];
            }
            mu
        })
        .collect()
}

/// Product of Givens rotations over every coordinate pair, each by an angle
/// drawn from `U(-strength, strength)`.
pub fn random_rotation(dim: usize, strength: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut q = vec![0.0; dim * dim];
    for i in 0..dim {
        q[i * dim + i] = 1.0;
    }
    if strength > 0.0 {
        for i in 0..dim {
            for j in i + 1..dim {
                let angle = rng.random_range(-strength..strength);
                let (s, c) = (math::sin(angle), math::cos(angle));
                // left-multiply by the rotation in the (i, j) plane
                for col in 0..dim {
                    let a = q[i * dim + col];
                    let b = q[j * dim + col];
                    q[i * dim + col] = c * a - s * b;
                    q[j * dim + col] = s * a + c * b;
                }
            }
        }
    }
    Tensor::matrix(dim, dim, q).expect("square")
}

/// Largest entry of `|Q^T Q - I|`.
pub fn orthogonality_error(q: &Tensor) -> f64 {
    let n = q.shape()[0];
    let d = q.data();
    let mut worst: f64 = 0.0;
    for a in 0..n {
        for b in 0..n {
            let dot: f64 = (0..n).map(|r| d[r * n + a] * d[r * n + b]).sum();
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max(math::abs(dot - target));
        }
    }
    worst
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * rng::normal(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("matrix")
}

fn mat_vec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let cols = m.shape()[1];
    m.data()
        .chunks(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Draws the full dataset. Deterministic in `config.seed`; each domain uses
/// its own derived stream, so domains can be generated independently.
pub fn generate(config: &DataGenConfig) -> Result<MultiModalDataset> {
    config.validate()?;
    let centroids = class_centroids(config.num_classes, config.latent_dim, config.centroid_scale);
    let mut prng = rng::rng(projection_seed(config.seed));
    let lscale = 1.0 / math::sqrt(config.latent_dim as f64);
    let projections: Vec<Tensor> = config
        .input_dims
        .iter()
        .map(|&d| gaussian_matrix(d, config.latent_dim, lscale, &mut prng))
        .collect();
    let domains = (0..config.num_domains)
        .map(|d| generate_domain(config, d, &centroids, &projections))
        .collect::<Result<_>>()?;
    Ok(MultiModalDataset {
        config: config.clone(),
        centroids,
        projections,
        domains,
    })
}

fn generate_domain(
    config: &DataGenConfig,
    domain_id: usize,
    centroids: &[Vec<f64>],
    projections: &[Tensor],
) -> Result<DomainData> {
    let mut r = rng::rng(domain_seed(config.seed, domain_id));
    let m = config.modalities();
    let mut rotations = Vec::with_capacity(m);
    let mut mean_shifts = Vec::with_capacity(m);
    for k in 0..m {
        let dim = config.input_dims[k];
        rotations.push(random_rotation(dim, config.rotation_strength[k], &mut r));
        mean_shifts.push(
            (0..dim)
                .map(|_| config.shift_scale[k] * rng::normal(&mut r))
                .collect(),
        );
    }
    let spec = DomainSpec {
        domain_id,
        rotations,
        mean_shifts,
        noise_std: config.noise_std.clone(),
    };
    // Fold A_k into R_{d,k} once per domain.
    let maps: Vec<Tensor> = (0..m)
        .map(|k| {
            let (rot, proj) = (&spec.rotations[k], &projections[k]);
            let (d, l) = (proj.shape()[0], proj.shape()[1]);
            let mut out = vec![0.0; d * l];
            for i in 0..d {
                for p in 0..d {
                    let rv = rot.data()[i * d + p];
                    for j in 0..l {
                        out[i * l + j] += rv * proj.data()[p * l + j];
                    }
                }
            }
            Tensor::matrix(d, l, out).expect("map")
        })
        .collect();
    let mut draw = |n: usize| -> Result<MultiModalBatch> {
        let mut labels = Vec::with_capacity(n);
        let mut cols: Vec<Vec<f64>> = config
            .input_dims
            .iter()
            .map(|&d| Vec::with_capacity(n * d))
            .collect();
        for _ in 0..n {
            let y = r.random_range(0..config.num_classes);
            let z: Vec<f64> = centroids[y]
                .iter()
                .map(|&mu| mu + rng::normal(&mut r))
                .collect();
            for k in 0..m {
                let signal = mat_vec(&maps[k], &z);
                for (i, s) in signal.into_iter().enumerate() {
                    let noise = config.noise_std[k] * rng::normal(&mut r);
                    cols[k].push(config.snr[k] * s + spec.mean_shifts[k][i] + noise);
                }
            }
            labels.push(y);
        }
        let modalities = cols
            .into_iter()
            .zip(&config.input_dims)
            .map(|(data, &d)| Tensor::matrix(n, d, data))
            .collect::<Result<_>>()?;
        Ok(MultiModalBatch { modalities, labels })
    };
    let train = draw(config.train_per_domain)?;
    let val = draw(config.val_per_domain)?;
    let test = draw(config.test_per_domain)?;
    Ok(DomainData {
        spec,
        train,
        val,
        test,
    })
}

/// Copy of `batch` with `x_k += N(0, variance)` elementwise.
pub fn perturb_batch(batch: &MultiModalBatch, k: usize, variance: f64, seed: u64) -> Result<MultiModalBatch> {
    check_perturb(k, batch.num_modalities(), variance)?;
    let mut out = batch.clone();
    if variance > 0.0 {
        let mut r = rng::rng(seed);
        let std = math::sqrt(variance);
        for v in out.modalities[k].data_mut() {
            *v += std * rng::normal(&mut r);
        }
    }
    Ok(out)
}

fn check_perturb(k: usize, m: usize, variance: f64) -> Result<()> {
    if k >= m {
        return Err(Error::InvalidConfig(format!(
            "modality {k} out of range for {m} modalities"
        )));
    }
    if !(variance >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "noise variance must be non-negative, got {variance}"
        )));
    }
    Ok(())
}

/// Adds Gaussian noise to modality `k` of every split of every domain.
/// Each split draws from its own stream derived from `seed`.
pub fn perturb_modality(dataset: &MultiModalDataset, k: usize, variance: f64, seed: u64) -> Result<MultiModalDataset> {
    check_perturb(k, dataset.config.modalities(), variance)?;
    let mut out = dataset.clone();
    for (d, dom) in out.domains.iter_mut().enumerate() {
        for (s, split) in [&mut dom.train, &mut dom.val, &mut dom.test].into_iter().enumerate() {
            let stream = rng::derive_seed(seed, (d * 3 + s) as u64);
            *split = perturb_batch(split, k, variance, stream)?;
        }
    }
    Ok(out)
}

/// Which domains train, validate and test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Protocol {
    /// Train on every domain except the target; test on all target rows.
    MultiSource,
    /// Train on one source domain; test on each other domain separately.
    SingleSource,
    /// Train, validate and test within one domain.
    InDomain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolSplits {
    pub sources: Vec<usize>,
    pub train: MultiModalBatch,
    pub val: MultiModalBatch,
    /// `(domain id, rows)` per evaluated domain.
    pub tests: Vec<(usize, MultiModalBatch)>,
}

/// Builds the splits for `protocol`. `domain` is the target for
/// [`Protocol::MultiSource`], the source for [`Protocol::SingleSource`] and
/// the only domain for [`Protocol::InDomain`].
pub fn protocol_splits(dataset: &MultiModalDataset, protocol: Protocol, domain: usize) -> Result<ProtocolSplits> {
    dataset.domain(domain)?;
    let n = dataset.domains.len();
    let out = match protocol {
        Protocol::MultiSource => {
            let sources: Vec<usize> = (0..n).filter(|&d| d != domain).collect();
            if sources.is_empty() {
                return Err(Error::InvalidConfig(
                    "multi-source protocol needs at least two domains".into(),
                ));
            }
            let train: Vec<&MultiModalBatch> = sources.iter().map(|&d| &dataset.domains[d].train).collect();
            let val: Vec<&MultiModalBatch> = sources.iter().map(|&d| &dataset.domains[d].val).collect();
            ProtocolSplits {
                train: MultiModalBatch::concat(&train)?,
                val: MultiModalBatch::concat(&val)?,
                tests: vec![(domain, dataset.domains[domain].full()?)],
                sources,
            }
        }
        Protocol::SingleSource => {
            let src = &dataset.domains[domain];
            let tests = (0..n)
                .filter(|&d| d != domain)
                .map(|d| Ok((d, dataset.domains[d].full()?)))
                .collect::<Result<Vec<_>>>()?;
            if tests.is_empty() {
                return Err(Error::InvalidConfig(
                    "single-source protocol needs at least two domains".into(),
                ));
            }
            ProtocolSplits {
                sources: vec![domain],
                train: src.train.clone(),
                val: src.val.clone(),
                tests,
            }
        }
        Protocol::InDomain => {
            let d = &dataset.domains[domain];
            ProtocolSplits {
                sources: vec![domain],
                train: d.train.clone(),
                val: d.val.clone(),
                tests: vec![(domain, d.test.clone())],
            }
        }
    };
    Ok(out)
}

/// Fails if any evaluation row also appears in the training or validation
/// rows (compared by content hash).
pub fn check_no_leakage(splits: &ProtocolSplits) -> Result<()> {
    let mut seen: Vec<u64> = (0..splits.train.len())
        .map(|i| splits.train.row_hash(i))
        .chain((0..splits.val.len()).map(|i| splits.val.row_hash(i)))
        .collect();
    seen.sort_unstable();
    for (d, test) in &splits.tests {
        for i in 0..test.len() {
            if seen.binary_search(&test.row_hash(i)).is_ok() {
                return Err(Error::InvalidConfig(format!(
                    "evaluation row {i} of domain {d} also appears in training data"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> DataGenConfig {
        DataGenConfig {
            num_domains: 3,
            num_classes: 4,
            latent_dim: 6,
            input_dims: vec![5, 7],
            snr: vec![2.0, 0.5],
            noise_std: vec![1.0, 1.0],
            rotation_strength: vec![0.5, 0.1],
            shift_scale: vec![1.0, 0.2],
            centroid_scale: 2.0,
            train_per_domain: 40,
            val_per_domain: 10,
            test_per_domain: 20,
            seed: 3,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&tiny_config()).unwrap();
        let b = generate(&tiny_config()).unwrap();
        assert_eq!(a, b);
        let mut other = tiny_config();
        other.seed = 4;
        assert_ne!(a.domains[0].train, generate(&other).unwrap().domains[0].train);
    }

    #[test]
    fn shapes_and_labels() {
        let ds = generate(&tiny_config()).unwrap();
        assert_eq!(ds.domains.len(), 3);
        for d in &ds.domains {
            assert_eq!(d.train.len(), 40);
            assert_eq!(d.val.len(), 10);
            assert_eq!(d.test.len(), 20);
            assert_eq!(d.train.modalities[1].shape(), &[40, 7]);
            assert!(d.train.labels.iter().all(|&y| y < 4));
        }
    }

    #[test]
    fn centroids_are_separated() {
        for (c, l) in [(2, 1), (4, 3), (4, 8), (8, 7)] {
            let mu = class_centroids(c, l, 2.0);
            for i in 0..c {
                assert_eq!(mu[i].len(), l);
                for j in i + 1..c {
                    let d2: f64 = mu[i].iter().zip(&mu[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    assert!((d2.sqrt() - 2.0 * 2f64.sqrt()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn latent_too_small_is_rejected() {
        let mut cfg = tiny_config();
        cfg.latent_dim = 2;
        assert!(matches!(generate(&cfg), Err(Error::InvalidConfig(_))));
        cfg.latent_dim = 3;
        assert!(generate(&cfg).is_ok());
    }

    #[test]
    fn rotations_are_orthogonal() {
        let ds = generate(&tiny_config()).unwrap();
        for d in &ds.domains {
            for q in &d.spec.rotations {
                assert!(orthogonality_error(q) < 1e-8);
            }
        }
        let mut r = rng::rng(1);
        assert!(orthogonality_error(&random_rotation(24, 3.0, &mut r)) < 1e-8);
    }

    #[test]
    fn zero_variance_perturbation_is_a_bitwise_copy() {
        let ds = generate(&tiny_config()).unwrap();
        assert_eq!(perturb_modality(&ds, 0, 0.0, 9).unwrap(), ds);
    }

    #[test]
    fn perturbation_touches_only_its_modality() {
        let ds = generate(&tiny_config()).unwrap();
        let p = perturb_modality(&ds, 1, 0.5, 9).unwrap();
        for (a, b) in ds.domains.iter().zip(&p.domains) {
            for (sa, sb) in [(&a.train, &b.train), (&a.val, &b.val), (&a.test, &b.test)] {
                assert_eq!(sa.modality_checksum(0), sb.modality_checksum(0));
                assert_ne!(sa.modality_checksum(1), sb.modality_checksum(1));
                assert_eq!(sa.labels, sb.labels);
            }
        }
    }

    #[test]
    fn perturb_rejects_bad_modality() {
        let ds = generate(&tiny_config()).unwrap();
        assert!(perturb_modality(&ds, 2, 1.0, 0).is_err());
    }

    #[test]
    fn multi_source_holds_out_the_target() {
        let ds = generate(&tiny_config()).unwrap();
        let s = protocol_splits(&ds, Protocol::MultiSource, 0).unwrap();
        assert_eq!(s.sources, vec![1, 2]);
        assert_eq!(s.train.len(), 80);
        assert_eq!(s.val.len(), 20);
        assert_eq!(s.tests.len(), 1);
        assert_eq!(s.tests[0].0, 0);
        assert_eq!(s.tests[0].1.len(), 70);
        check_no_leakage(&s).unwrap();
    }

    #[test]
    fn single_source_tests_every_other_domain() {
        let ds = generate(&tiny_config()).unwrap();
        let s = protocol_splits(&ds, Protocol::SingleSource, 0).unwrap();
        assert_eq!(s.sources, vec![0]);
        assert_eq!(s.train, ds.domains[0].train);
        let targets: Vec<usize> = s.tests.iter().map(|(d, _)| *d).collect();
        assert_eq!(targets, vec![1, 2]);
        check_no_leakage(&s).unwrap();
    }

    #[test]
    fn unknown_domain_is_an_error() {
        let ds = generate(&tiny_config()).unwrap();
        assert_eq!(
            protocol_splits(&ds, Protocol::MultiSource, 5).unwrap_err(),
            Error::UnknownDomain { id: 5 }
        );
    }

    #[test]
    fn leakage_is_detected() {
        let ds = generate(&tiny_config()).unwrap();
        let mut s = protocol_splits(&ds, Protocol::InDomain, 1).unwrap();
        check_no_leakage(&s).unwrap();
        s.tests[0].1 = MultiModalBatch::concat(&[&s.tests[0].1, &s.train.select(&[3]).unwrap()]).unwrap();
        assert!(check_no_leakage(&s).is_err());
    }
}

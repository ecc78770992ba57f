//! Datasets, synthetic generators, client sharding and the binary file format.
//!
//! # File format
//!
//! All integers little-endian:
//!
//! ```text
//! magic    "FPDS"              4 bytes
//! version  u32 = 1
//! n        u64                 sample count, >= 1
//! classes  u32
//! rank     u32
//! dims     u32 × rank          per-sample feature shape
//! features f32 × n·∏dims       row-major
//! labels   u16 × n
//! ```

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Batch, Targets};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FPDS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
        }
        if features.shape().len() < 2 || features.rows() != labels.len() {
            return Err(Error::shape("dataset", &[labels.len()], features.shape()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Dataset {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-sample feature shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
        )
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            features: self.features.select_rows(indices),
            targets: Targets::Classes(indices.iter().map(|&i| self.labels[i]).collect()),
        }
    }

    pub fn full_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            targets: Targets::Classes(self.labels.clone()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.sample_shape();
        let mut out = Vec::with_capacity(32 + self.features.len() * 4 + self.len() * 2);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in self.features.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u16).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic {
                what: "dataset",
                expected: "FPDS",
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                what: "dataset",
                version,
            });
        }
        let n = r.u64()? as usize;
        if n == 0 {
            return Err(Error::Format("dataset file holds zero samples".into()));
        }
        let classes = r.u32()? as usize;
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let per: usize = dims.iter().product();
        let count = n
            .checked_mul(per)
            .filter(|c| c.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or(Error::Truncated { what: "dataset" })?;
        let raw = r.take(count * 4)?;
        let features: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let raw = r.take(n * 2)?;
        let labels: Vec<usize> = raw
            .chunks_exact(2)
            .map(|c| usize::from(u16::from_le_bytes([c[0], c[1]])))
            .collect();
        if r.at != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after dataset",
                bytes.len() - r.at
            )));
        }
        let mut shape = vec![n];
        shape.extend(dims);
        Dataset::new(Tensor::new(shape, features)?, labels, classes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(Error::Truncated { what: "dataset" })?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&dataset.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut bytes = vec![];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(&bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    Blobs,
    Spirals,
    MicroImages,
}

/// Parameters for [`generate_synthetic`]. Fields not used by a kind are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    pub kind: SyntheticKind,
    pub n: usize,
    pub classes: usize,
    /// Feature dimension for blobs.
    pub dim: usize,
    /// Noise standard deviation.
    pub noise: f64,
    /// Distance between neighbouring blob centres in units of `noise`.
    pub separation: f64,
    /// Image channels for micro-images (images are `channels × 8 × 8`).
    pub channels: usize,
    pub balanced: bool,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            kind: SyntheticKind::Blobs,
            n: 600,
            classes: 3,
            dim: 4,
            noise: 1.0,
            separation: 10.0,
            channels: 1,
            balanced: true,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = vec![];
        if self.n == 0 {
            errs.push("data.n must be >= 1".into());
        }
        if self.classes < 2 || self.classes > usize::from(u16::MAX) {
            errs.push(format!("data.classes must be in [2, 65535], got {}", self.classes));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            errs.push(format!("data.noise must be finite and >= 0, got {}", self.noise));
        }
        match self.kind {
            SyntheticKind::Blobs => {
                if self.dim < 2 {
                    errs.push("blobs need data.dim >= 2".into());
                }
                if !(self.separation > 0.0) {
                    errs.push("blobs need data.separation > 0".into());
                }
            }
            SyntheticKind::Spirals => {}
            SyntheticKind::MicroImages => {
                if self.channels == 0 {
                    errs.push("micro-images need data.channels >= 1".into());
                }
            }
        }
        errs
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        match self.kind {
            SyntheticKind::Blobs => vec![self.dim],
            SyntheticKind::Spirals => vec![2],
            SyntheticKind::MicroImages => vec![self.channels, 8, 8],
        }
    }
}

/// Blob centres: axis-aligned when `dim >= classes`, otherwise evenly spaced on
/// a circle in the first two coordinates. Neighbouring centres are
/// `separation · noise` apart.
pub fn blob_centers(p: &SyntheticParams) -> Vec<Vec<f64>> {
    let gap = p.separation * p.noise.max(f64::MIN_POSITIVE);
    (0..p.classes)
        .map(|c| {
            let mut center = vec![0.0; p.dim];
            if p.dim >= p.classes {
                center[c] = gap / std::f64::consts::SQRT_2;
            } else {
                let radius = gap / (2.0 * (PI / p.classes as f64).sin());
                let angle = 2.0 * PI * c as f64 / p.classes as f64;
                center[0] = radius * angle.cos();
                center[1] = radius * angle.sin();
            }
            center
        })
        .collect()
}

fn labels_for(p: &SyntheticParams, rng: &mut seed::Rng) -> Vec<usize> {
    if p.balanced {
        let mut labels: Vec<usize> = (0..p.n).map(|i| i % p.classes).collect();
        labels.shuffle(rng);
        labels
    } else {
        (0..p.n).map(|_| rng.random_range(0..p.classes)).collect()
    }
}

fn image_templates(p: &SyntheticParams, seed_value: u64) -> Vec<Vec<f64>> {
    (0..p.classes)
        .map(|c| {
            let mut rng = seed::derived_rng(seed_value, "templates", c as u64);
            // 4×4 coarse pattern upsampled to 8×8.
            let coarse: Vec<f64> = (0..p.channels * 16).map(|_| rng.random::<f64>()).collect();
            let mut img = vec![0.0; p.channels * 64];
            for ch in 0..p.channels {
                for y in 0..8 {
                    for x in 0..8 {
                        img[(ch * 8 + y) * 8 + x] = coarse[(ch * 4 + y / 2) * 4 + x / 2];
                    }
                }
            }
            img
        })
        .collect()
}

/// Deterministic synthetic data. Feature values are rounded to `f32` so the
/// binary file format stores them exactly.
pub fn generate_synthetic(p: &SyntheticParams, seed_value: u64) -> Result<Dataset> {
    let errs = p.validate();
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    let mut rng = seed::derived_rng(seed_value, "synthetic", 0);
    let labels = labels_for(p, &mut rng);
    let noise = Normal::new(0.0, p.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let shape = p.sample_shape();
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(p.n * per);
    match p.kind {
        SyntheticKind::Blobs => {
            let centers = blob_centers(p);
            for &l in &labels {
                for d in 0..p.dim {
                    data.push(centers[l][d] + noise.sample(&mut rng));
                }
            }
        }
        SyntheticKind::Spirals => {
            for &l in &labels {
                let t: f64 = rng.random::<f64>();
                let angle = 2.0 * PI * l as f64 / p.classes as f64 + 3.0 * PI * t;
                let r = 0.1 + t;
                data.push(r * angle.cos() + noise.sample(&mut rng));
                data.push(r * angle.sin() + noise.sample(&mut rng));
            }
        }
        SyntheticKind::MicroImages => {
            let templates = image_templates(p, seed_value);
            for &l in &labels {
                for v in &templates[l] {
                    data.push((v + noise.sample(&mut rng)).clamp(0.0, 1.0));
                }
            }
        }
    }
    for v in &mut data {
        *v = f64::from(*v as f32);
    }
    let mut full_shape = vec![p.n];
    full_shape.extend(shape);
    Dataset::new(Tensor::new(full_shape, data)?, labels, p.classes)
}

/// Per-client index lists into a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardAssignment {
    pub shards: Vec<Vec<usize>>,
}

impl ShardAssignment {
    pub fn clients(&self) -> usize {
        self.shards.len()
    }

    /// Checks disjointness, non-emptiness and that every index is below `n`.
    pub fn check(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (c, shard) in self.shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::EmptyShard(c));
            }
            for &i in shard {
                if i >= n {
                    return Err(Error::OutOfRange { index: i, len: n });
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Structure(format!("index {i} assigned twice")));
                }
            }
        }
        Ok(())
    }
}

/// Global shuffle, then contiguous shards whose sizes differ by at most one.
pub fn partition_iid(dataset: &Dataset, clients: usize, seed_value: u64) -> Result<ShardAssignment> {
    let n = dataset.len();
    if clients == 0 || clients > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} samples across {clients} clients"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::derived_rng(seed_value, "partition-iid", 0));
    let base = n / clients;
    let extra = n % clients;
    let mut shards = Vec::with_capacity(clients);
    let mut at = 0;
    for c in 0..clients {
        let size = base + usize::from(c < extra);
        shards.push(order[at..at + size].to_vec());
        at += size;
    }
    Ok(ShardAssignment { shards })
}

/// Draws `Dirichlet(alpha · 1)` over `k` categories via normalized gammas.
pub fn sample_dirichlet(alpha: f64, k: usize, rng: &mut seed::Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|d| d / total).collect()
    } else {
        // Every gamma underflowed: the limit puts all mass on one category.
        let winner = rng.random_range(0..k);
        (0..k).map(|i| if i == winner { 1.0 } else { 0.0 }).collect()
    }
}

/// Label-skewed shards: for each class, client proportions are drawn from
/// `Dirichlet(alpha)` and the class's shuffled indices are cut at the
/// cumulative proportions. Empty clients then take one sample from the
/// currently largest client (lowest id on ties).
pub fn partition_dirichlet(
    dataset: &Dataset,
    clients: usize,
    alpha: f64,
    seed_value: u64,
) -> Result<ShardAssignment> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("dirichlet alpha must be > 0, got {alpha}")));
    }
    let n = dataset.len();
    if clients == 0 || clients > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} samples across {clients} clients"
        )));
    }
    let mut rng = seed::derived_rng(seed_value, "partition-dirichlet", 0);
    let mut by_class: Vec<Vec<usize>> = vec![vec![]; dataset.classes()];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut shards: Vec<Vec<usize>> = vec![vec![]; clients];
    for mut members in by_class {
        members.shuffle(&mut rng);
        let props = sample_dirichlet(alpha, clients, &mut rng);
        let total = members.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (c, p) in props.iter().enumerate() {
            cum += p;
            let end = if c + 1 == clients {
                total
            } else {
                ((cum * total as f64).floor() as usize).clamp(start, total)
            };
            shards[c].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    loop {
        let Some(empty) = shards.iter().position(Vec::is_empty) else {
            break;
        };
        let largest = (0..clients)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("clients > 0");
        let moved = shards[largest].pop().expect("largest shard non-empty");
        shards[empty].push(moved);
    }
    Ok(ShardAssignment { shards })
}

/// Indices of a class-balanced test set (`per_class` of each class) and the remainder.
pub fn balanced_test_indices(dataset: &Dataset, per_class: usize, seed_value: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let counts = dataset.class_counts();
    if let Some((c, &have)) = counts.iter().enumerate().find(|(_, &k)| k < per_class) {
        return Err(Error::InvalidArgument(format!(
            "class {c} has {have} samples, test split needs {per_class}"
        )));
    }
    let mut rng = seed::derived_rng(seed_value, "test-split", 0);
    let mut by_class: Vec<Vec<usize>> = vec![vec![]; dataset.classes()];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut in_test = vec![false; dataset.len()];
    for mut members in by_class {
        members.shuffle(&mut rng);
        for &i in &members[..per_class] {
            in_test[i] = true;
        }
    }
    let (test, rest): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| in_test[i]);
    Ok((test, rest))
}

pub fn balanced_test_split(dataset: &Dataset, per_class: usize, seed_value: u64) -> Result<(Dataset, Dataset)> {
    let (test, rest) = balanced_test_indices(dataset, per_class, seed_value)?;
    if rest.is_empty() {
        return Err(Error::InvalidArgument("test split leaves no training data".into()));
    }
    Ok((dataset.subset(&test)?, dataset.subset(&rest)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, classes: usize, seed_value: u64) -> Dataset {
        generate_synthetic(
            &SyntheticParams {
                n,
                classes,
                dim: classes.max(2),
                ..Default::default()
            },
            seed_value,
        )
        .unwrap()
    }

    #[test]
    fn balanced_blobs() {
        let d = blobs(300, 3, 1);
        assert_eq!(d.class_counts(), vec![100, 100, 100]);
        assert_eq!(d, blobs(300, 3, 1));
        assert_ne!(d, blobs(300, 3, 2));
    }

    #[test]
    fn every_kind_generates() {
        for kind in [SyntheticKind::Blobs, SyntheticKind::Spirals, SyntheticKind::MicroImages] {
            let p = SyntheticParams {
                kind,
                n: 20,
                classes: 4,
                channels: 2,
                noise: 0.1,
                ..Default::default()
            };
            let d = generate_synthetic(&p, 3).unwrap();
            assert_eq!(d.sample_shape(), p.sample_shape().as_slice());
            if kind == SyntheticKind::MicroImages {
                assert!(d.features().data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn iid_pigeonhole() {
        let d = blobs(100, 2, 1);
        let s = partition_iid(&d, 40, 4).unwrap();
        let threes = s.shards.iter().filter(|x| x.len() == 3).count();
        let twos = s.shards.iter().filter(|x| x.len() == 2).count();
        assert_eq!((threes, twos), (20, 20));
        s.check(d.len()).unwrap();
        let mut all: Vec<usize> = s.shards.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(partition_iid(&d, 101, 0).is_err());
    }

    #[test]
    fn dirichlet_conserves_indices() {
        let d = blobs(500, 5, 2);
        for alpha in [0.05, 1.0, 100.0] {
            let s = partition_dirichlet(&d, 7, alpha, 3).unwrap();
            s.check(d.len()).unwrap();
            assert_eq!(s.shards.iter().map(Vec::len).sum::<usize>(), 500);
            for c in 0..5 {
                let per_class: usize = s
                    .shards
                    .iter()
                    .map(|sh| sh.iter().filter(|&&i| d.labels()[i] == c).count())
                    .sum();
                assert_eq!(per_class, 100);
            }
        }
        assert!(partition_dirichlet(&d, 3, 0.0, 0).is_err());
    }

    #[test]
    fn dirichlet_repairs_empty_clients() {
        // Tiny alpha concentrates each class on one client, leaving most empty.
        let d = blobs(30, 3, 2);
        let s = partition_dirichlet(&d, 10, 1e-3, 5).unwrap();
        s.check(d.len()).unwrap();
    }

    #[test]
    fn test_split_balanced() {
        let d = blobs(90, 3, 1);
        let (test, rest) = balanced_test_split(&d, 10, 8).unwrap();
        assert_eq!(test.len(), 30);
        assert_eq!(test.class_counts(), vec![10, 10, 10]);
        assert_eq!(rest.len(), 60);
        let (ti, ri) = balanced_test_indices(&d, 10, 8).unwrap();
        let mut all = [ti.clone(), ri].concat();
        all.sort_unstable();
        assert_eq!(all, (0..90).collect::<Vec<_>>());
        assert_eq!(balanced_test_indices(&d, 10, 8).unwrap().0, ti);
        assert!(balanced_test_split(&d, 31, 8).is_err());
    }

    #[test]
    fn file_roundtrip_and_errors() {
        let d = generate_synthetic(
            &SyntheticParams {
                kind: SyntheticKind::MicroImages,
                n: 12,
                classes: 3,
                channels: 1,
                noise: 0.2,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let bytes = d.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert!(back.features().bit_eq(d.features()));
        assert_eq!(back.labels(), d.labels());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(Dataset::from_bytes(&bad).unwrap_err().to_string(), "bad magic in dataset: expected \"FPDS\"");
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut zero = bytes.clone();
        zero[8..16].copy_from_slice(&0u64.to_le_bytes());
        assert!(Dataset::from_bytes(&zero).is_err());
        let mut label = bytes.clone();
        let last = label.len() - 2;
        label[last..].copy_from_slice(&7u16.to_le_bytes());
        assert!(matches!(Dataset::from_bytes(&label), Err(Error::LabelOutOfRange { .. })));
    }
}

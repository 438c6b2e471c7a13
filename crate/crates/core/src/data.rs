//! Dataset loading (IDX image/label files), a synthetic Gaussian-blob
//! generator, and non-i.i.d. partitioning of a corpus across users.

use crate::error::{Error, Result};
use crate::model::LocalDataset;
use crate::rng::{rng_from, stream};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use std::collections::BTreeMap;
use std::path::Path;

/// Radius of the sphere the synthetic class means are drawn on.
const BLOB_RADIUS: f64 = 3.0;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// How a corpus is split across users.
#[derive(Debug, Clone, PartialEq)]
pub enum PartitionMode {
    /// Each user receives samples from exactly `k` classes.
    ClassesPerUser { k: usize },
    /// Per-user class proportions drawn from a symmetric Dirichlet with
    /// concentration `beta`; smaller `beta` is more skewed.
    Dirichlet { beta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub num_users: usize,
    pub samples_per_user: usize,
    pub seed: u64,
}

/// A probability distribution over class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("label distribution"));
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::Config("label probabilities must be non-negative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("label probabilities sum to {sum}, expected 1")));
        }
        Ok(Self { probs })
    }

    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::Empty("label counts"));
        }
        Ok(Self { probs: counts.iter().map(|&c| c as f64 / total as f64).collect() })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// The most frequent class; ties go to the lowest index.
    pub fn dominant_class(&self) -> usize {
        let mut best = 0;
        for c in 1..self.probs.len() {
            if self.probs[c] > self.probs[best] {
                best = c;
            }
        }
        best
    }
}

fn read_be_u32(bytes: &[u8], pos: usize, path: &Path) -> Result<u32> {
    let end = pos + 4;
    if end > bytes.len() {
        return Err(Error::IdxFormat {
            path: path.display().to_string(),
            reason: format!("truncated header at byte {pos}"),
        });
    }
    Ok(u32::from_be_bytes([bytes[pos], bytes[pos + 1], bytes[pos + 2], bytes[pos + 3]]))
}

/// Loads an IDX image file and its companion label file into a dataset.
/// Pixel bytes are scaled to `[0, 1]` by dividing by 255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LocalDataset> {
    let img = std::fs::read(images_path).map_err(|e| Error::IdxFormat {
        path: images_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let lab = std::fs::read(labels_path).map_err(|e| Error::IdxFormat {
        path: labels_path.display().to_string(),
        reason: e.to_string(),
    })?;

    let magic = read_be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxFormat {
            path: images_path.display().to_string(),
            reason: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_be_u32(&img, 4, images_path)? as usize;
    let rows = read_be_u32(&img, 8, images_path)? as usize;
    let cols = read_be_u32(&img, 12, images_path)? as usize;
    let pixels = rows * cols;
    if img.len() != 16 + count * pixels {
        return Err(Error::IdxFormat {
            path: images_path.display().to_string(),
            reason: format!("expected {} data bytes, found {}", count * pixels, img.len() - 16),
        });
    }

    let lmagic = read_be_u32(&lab, 0, labels_path)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::IdxFormat {
            path: labels_path.display().to_string(),
            reason: format!("bad magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let lcount = read_be_u32(&lab, 4, labels_path)? as usize;
    if lab.len() != 8 + lcount {
        return Err(Error::IdxFormat {
            path: labels_path.display().to_string(),
            reason: format!("expected {lcount} data bytes, found {}", lab.len() - 8),
        });
    }
    if lcount != count {
        return Err(Error::IdxFormat {
            path: labels_path.display().to_string(),
            reason: format!("{lcount} labels for {count} images"),
        });
    }

    let mut data = LocalDataset::new(pixels);
    let mut features = vec![0.0; pixels];
    for i in 0..count {
        let start = 16 + i * pixels;
        for (f, b) in features.iter_mut().zip(&img[start..start + pixels]) {
            *f = *b as f64 / 255.0;
        }
        data.push(&features, lab[8 + i] as usize);
    }
    Ok(data)
}

/// Generates `samples_per_class` points per class from isotropic unit-variance
/// Gaussians whose means lie on a sphere of radius 3. Samples are ordered
/// class-major.
pub fn synth_dataset(
    num_classes: usize,
    num_features: usize,
    samples_per_class: usize,
    seed: u64,
) -> LocalDataset {
    let mut means_rng = rng_from(seed, &[stream::DATA, 0]);
    let mut means = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let v: Vec<f64> = (0..num_features).map(|_| means_rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mean: Vec<f64> = if norm < 1e-12 {
            let mut e = vec![0.0; num_features];
            e[0] = BLOB_RADIUS;
            e
        } else {
            v.iter().map(|x| x * BLOB_RADIUS / norm).collect()
        };
        means.push(mean);
    }

    let mut data = LocalDataset::new(num_features);
    let mut x = vec![0.0; num_features];
    for (c, mean) in means.iter().enumerate() {
        let mut rng = rng_from(seed, &[stream::DATA, 1 + c as u64]);
        for _ in 0..samples_per_class {
            for (xv, m) in x.iter_mut().zip(mean) {
                let n: f64 = rng.sample(StandardNormal);
                *xv = m + n;
            }
            data.push(&x, c);
        }
    }
    data
}

/// Empirical label distribution of a dataset over `num_classes` classes.
pub fn label_distribution(dataset: &LocalDataset, num_classes: usize) -> Result<LabelDistribution> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut counts = vec![0usize; num_classes];
    for &l in dataset.labels() {
        if l >= num_classes {
            return Err(Error::Config(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        counts[l] += 1;
    }
    LabelDistribution::from_counts(&counts)
}

struct ClassPools {
    /// Sample indices grouped by class, each group pre-shuffled.
    pools: Vec<Vec<usize>>,
    consumed: Vec<Vec<bool>>,
}

impl ClassPools {
    fn build(dataset: &LocalDataset, num_classes: usize, seed: u64) -> Self {
        let mut pools = vec![Vec::new(); num_classes];
        for (i, &l) in dataset.labels().iter().enumerate() {
            pools[l].push(i);
        }
        for (c, pool) in pools.iter_mut().enumerate() {
            let mut rng = rng_from(seed, &[stream::PARTITION, 1, c as u64]);
            pool.shuffle(&mut rng);
        }
        let consumed = pools.iter().map(|p| vec![false; p.len()]).collect();
        Self { pools, consumed }
    }

    fn remaining(&self, class: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pools[class]
            .iter()
            .enumerate()
            .filter(move |(pos, _)| !self.consumed[class][*pos])
            .map(move |(pos, &sample)| (pos, sample))
    }

    fn take(&mut self, class: usize, pos: usize) {
        self.consumed[class][pos] = true;
    }
}

/// Draws `need` samples for one user from the given classes: without
/// replacement from the remaining pools while they last, then uniformly with
/// replacement from the full class population.
fn draw_user_samples(
    pools: &mut ClassPools,
    classes: &[usize],
    need: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    // candidates holds (class, position); samples are resolved after selection.
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for &c in classes {
        candidates.extend(pools.remaining(c).map(|(pos, _)| (c, pos)));
    }
    candidates.shuffle(rng);
    let take_direct = need.min(candidates.len());
    let mut chosen = Vec::with_capacity(need);
    for &(c, pos) in &candidates[..take_direct] {
        chosen.push(pools.pools[c][pos]);
        pools.take(c, pos);
    }
    if take_direct < need {
        let full: Vec<usize> = classes.iter().flat_map(|&c| pools.pools[c].iter().copied()).collect();
        for _ in take_direct..need {
            chosen.push(full[rng.random_range(0..full.len())]);
        }
    }
    chosen
}

fn largest_remainder_counts(props: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = props.iter().map(|p| (p * total as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    // Largest fractional part first; ties to the lower class index.
    order.sort_by(|&a, &b| {
        let fa = props[a] * total as f64 - (props[a] * total as f64).floor();
        let fb = props[b] * total as f64 - (props[b] * total as f64).floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..(total - assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

/// Splits a corpus into `num_users` local datasets of exactly
/// `samples_per_user` samples each, with class skew controlled by the mode.
pub fn partition(dataset: &LocalDataset, spec: &PartitionSpec) -> Result<Vec<LocalDataset>> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if spec.num_users == 0 {
        return Err(Error::Config("num_users must be at least 1".into()));
    }
    if spec.samples_per_user == 0 {
        return Err(Error::Config("samples_per_user must be at least 1".into()));
    }
    if spec.num_users * spec.samples_per_user > dataset.len() {
        return Err(Error::Config(format!(
            "insufficient samples overall: {} users x {} samples > corpus of {}",
            spec.num_users,
            spec.samples_per_user,
            dataset.len()
        )));
    }
    let num_classes = dataset.labels().iter().copied().max().unwrap() + 1;
    let mut pools = ClassPools::build(dataset, num_classes, spec.seed);

    let mut users = Vec::with_capacity(spec.num_users);
    match spec.mode {
        PartitionMode::ClassesPerUser { k } => {
            if k == 0 || k > num_classes {
                return Err(Error::Config(format!(
                    "classes per user must be in 1..={num_classes}, got {k}"
                )));
            }
            let mut class_order: Vec<usize> = (0..num_classes).collect();
            let mut rng = rng_from(spec.seed, &[stream::PARTITION, 0]);
            class_order.shuffle(&mut rng);
            for m in 0..spec.num_users {
                let classes: Vec<usize> =
                    (0..k).map(|j| class_order[(m * k + j) % num_classes]).collect();
                let mut user_rng = rng_from(spec.seed, &[stream::PARTITION, 2, m as u64]);
                let chosen =
                    draw_user_samples(&mut pools, &classes, spec.samples_per_user, &mut user_rng);
                users.push(dataset.subset(&chosen));
            }
        }
        PartitionMode::Dirichlet { beta } => {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::Config(format!("dirichlet beta must be positive, got {beta}")));
            }
            let gamma = Gamma::new(beta, 1.0)
                .map_err(|e| Error::Config(format!("dirichlet beta {beta}: {e}")))?;
            for m in 0..spec.num_users {
                let mut user_rng = rng_from(spec.seed, &[stream::PARTITION, 3, m as u64]);
                let draws: Vec<f64> = (0..num_classes).map(|_| gamma.sample(&mut user_rng)).collect();
                let sum: f64 = draws.iter().sum();
                let props: Vec<f64> = if sum > 0.0 && sum.is_finite() {
                    draws.iter().map(|g| g / sum).collect()
                } else {
                    vec![1.0 / num_classes as f64; num_classes]
                };
                let counts = largest_remainder_counts(&props, spec.samples_per_user);
                let mut chosen = Vec::with_capacity(spec.samples_per_user);
                for (c, &count) in counts.iter().enumerate() {
                    if count > 0 {
                        chosen.extend(draw_user_samples(&mut pools, &[c], count, &mut user_rng));
                    }
                }
                users.push(dataset.subset(&chosen));
            }
        }
    }
    Ok(users)
}

/// Per-class sample counts of a dataset, for inspection in tests and tools.
pub fn class_counts(dataset: &LocalDataset) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for &l in dataset.labels() {
        *counts.entry(l).or_insert(0) += 1;
    }
    counts
}

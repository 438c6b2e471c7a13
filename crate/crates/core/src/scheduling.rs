//! User scheduling: the entropy-maximizing policy over label distributions,
//! and the estimation-phase machinery that recovers per-user update
//! representations from superimposed rounds (least squares over the
//! participation pattern), clusters them, and schedules one user per cluster.

use crate::data::LabelDistribution;
use crate::error::{Error, Result};
use crate::model::ModelVector;
use crate::rng::rng_from;
use nalgebra::DMatrix;
use rand::Rng;
use std::collections::BTreeSet;

/// Feasible-set size up to which the entropy policy searches all subsets.
const EXHAUSTIVE_LIMIT: usize = 15;

/// Schedules every feasible user.
pub fn schedule_all(feasible: &BTreeSet<usize>) -> BTreeSet<usize> {
    feasible.clone()
}

fn check_label_inputs(labels: &[LabelDistribution], weights: &[f64]) -> Result<usize> {
    if labels.is_empty() {
        return Err(Error::Empty("label distributions"));
    }
    if weights.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "label weights",
            expected: labels.len(),
            actual: weights.len(),
        });
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Config("label weights must be non-negative".into()));
    }
    let num_classes = labels[0].num_classes();
    for l in labels {
        if l.num_classes() != num_classes {
            return Err(Error::DimensionMismatch {
                context: "label distribution classes",
                expected: num_classes,
                actual: l.num_classes(),
            });
        }
    }
    Ok(num_classes)
}

fn mixture_entropy<'a>(
    subset: impl Iterator<Item = &'a usize>,
    labels: &[LabelDistribution],
    weights: &[f64],
    num_classes: usize,
) -> f64 {
    let mut mix = vec![0.0; num_classes];
    let mut total_w = 0.0;
    for &m in subset {
        let w = weights[m];
        total_w += w;
        for (acc, p) in mix.iter_mut().zip(labels[m].probs()) {
            *acc += w * p;
        }
    }
    if total_w <= 0.0 {
        return 0.0;
    }
    let mut h = 0.0;
    for p in &mix {
        let p = p / total_w;
        if p > 0.0 {
            h -= p * p.log2();
        }
    }
    h
}

/// Shannon entropy (bits) of the sample-count-weighted mixture of the label
/// distributions of the users in `subset`.
pub fn subset_entropy(
    subset: &BTreeSet<usize>,
    labels: &[LabelDistribution],
    weights: &[f64],
) -> Result<f64> {
    let num_classes = check_label_inputs(labels, weights)?;
    if subset.is_empty() {
        return Err(Error::Empty("subset"));
    }
    if let Some(&m) = subset.iter().find(|&&m| m >= labels.len()) {
        return Err(Error::Config(format!(
            "subset user {m} out of range for {} users",
            labels.len()
        )));
    }
    Ok(mixture_entropy(subset.iter(), labels, weights, num_classes))
}

fn exhaustive_entropy_schedule(
    feasible: &[usize],
    labels: &[LabelDistribution],
    weights: &[f64],
    num_classes: usize,
) -> BTreeSet<usize> {
    let n = feasible.len();
    let mut best_mask = 0u32;
    let mut best_h = f64::NEG_INFINITY;
    for mask in 1u32..(1u32 << n) {
        let subset = feasible
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, m)| m);
        let h = mixture_entropy(subset, labels, weights, num_classes);
        if h > best_h {
            best_h = h;
            best_mask = mask;
        }
    }
    feasible
        .iter()
        .enumerate()
        .filter(|(i, _)| best_mask & (1 << i) != 0)
        .map(|(_, &m)| m)
        .collect()
}

fn greedy_entropy_schedule(
    feasible: &[usize],
    labels: &[LabelDistribution],
    weights: &[f64],
    num_classes: usize,
    max_subset: Option<usize>,
) -> BTreeSet<usize> {
    let cap = max_subset.unwrap_or(usize::MAX);
    let mut selected: BTreeSet<usize> = BTreeSet::new();
    let mut current_h = f64::NEG_INFINITY;
    while selected.len() < cap {
        let mut best: Option<(f64, usize)> = None;
        for &m in feasible {
            if selected.contains(&m) {
                continue;
            }
            let h = mixture_entropy(selected.iter().chain(std::iter::once(&m)), labels, weights, num_classes);
            // Strictly-greater comparison keeps ties on the lowest index.
            if best.map_or(true, |(bh, _)| h > bh) {
                best = Some((h, m));
            }
        }
        match best {
            Some((h, m)) if h > current_h || selected.is_empty() => {
                selected.insert(m);
                current_h = h;
            }
            _ => break,
        }
    }
    selected
}

/// Selects the feasible subset with maximum mixture label entropy:
/// exhaustively when at most 15 users are feasible, greedily (add the best
/// user while entropy strictly increases, ties to the lowest index)
/// otherwise. `max_subset` caps the greedy subset size.
pub fn schedule_entropy(
    feasible: &BTreeSet<usize>,
    labels: &[LabelDistribution],
    weights: &[f64],
    max_subset: Option<usize>,
) -> Result<BTreeSet<usize>> {
    let num_classes = check_label_inputs(labels, weights)?;
    if feasible.is_empty() {
        return Ok(BTreeSet::new());
    }
    if let Some(&m) = feasible.iter().find(|&&m| m >= labels.len()) {
        return Err(Error::Config(format!(
            "feasible user {m} out of range for {} users",
            labels.len()
        )));
    }
    let f: Vec<usize> = feasible.iter().copied().collect();
    if f.len() <= EXHAUSTIVE_LIMIT {
        Ok(exhaustive_entropy_schedule(&f, labels, weights, num_classes))
    } else {
        Ok(greedy_entropy_schedule(&f, labels, weights, num_classes, max_subset))
    }
}

/// Participation masks and rescaled aggregate observations collected during
/// the estimation phase, one row per round.
#[derive(Debug, Clone, Default)]
pub struct ParticipationRecord {
    num_users: usize,
    masks: Vec<Vec<bool>>,
    rows: Vec<ModelVector>,
}

impl ParticipationRecord {
    pub fn new(num_users: usize) -> Self {
        Self { num_users, masks: Vec::new(), rows: Vec::new() }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    /// Stored observations: the round's estimated average update rescaled by
    /// its scheduled-set size, i.e. an estimate of the *sum* of the
    /// participating users' updates.
    pub fn rows(&self) -> &[ModelVector] {
        &self.rows
    }

    /// How many recorded rounds each user participated in.
    pub fn participation_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_users];
        for mask in &self.masks {
            for (m, &bit) in mask.iter().enumerate() {
                if bit {
                    counts[m] += 1;
                }
            }
        }
        counts
    }

    /// Records one estimation round. `estimate` is the per-round output of
    /// the channel estimator (an average over the scheduled set), which is
    /// rescaled by `num_scheduled` before storage.
    pub fn accumulate_round(
        &mut self,
        mask: &[bool],
        estimate: &ModelVector,
        num_scheduled: usize,
    ) -> Result<()> {
        if mask.len() != self.num_users {
            return Err(Error::DimensionMismatch {
                context: "participation mask",
                expected: self.num_users,
                actual: mask.len(),
            });
        }
        let ones = mask.iter().filter(|&&b| b).count();
        if ones == 0 {
            return Err(Error::Empty("participation mask"));
        }
        if ones != num_scheduled {
            return Err(Error::Config(format!(
                "mask has {ones} participants but num_scheduled is {num_scheduled}"
            )));
        }
        if let Some(first) = self.rows.first() {
            if estimate.dim() != first.dim() {
                return Err(Error::DimensionMismatch {
                    context: "estimation row",
                    expected: first.dim(),
                    actual: estimate.dim(),
                });
            }
        }
        self.masks.push(mask.to_vec());
        self.rows.push(estimate.scale(num_scheduled as f64));
        Ok(())
    }

    /// Default ridge level: `1e-6 * trace(A^T A) / num_users`.
    pub fn default_ridge(&self) -> f64 {
        let trace: usize = self.participation_counts().iter().sum();
        1e-6 * trace as f64 / self.num_users as f64
    }
}

/// Estimated per-user update representations.
#[derive(Debug, Clone)]
pub struct RepresentationMatrix {
    reps: Vec<ModelVector>,
    identifiable: Vec<bool>,
}

impl RepresentationMatrix {
    pub fn num_users(&self) -> usize {
        self.reps.len()
    }

    pub fn rep(&self, user: usize) -> &ModelVector {
        &self.reps[user]
    }

    /// Whether the user appeared in at least one estimation round; rows of
    /// users never observed carry no information and are flagged rather than
    /// silently zero.
    pub fn is_identifiable(&self, user: usize) -> bool {
        self.identifiable[user]
    }

    pub fn identifiable_users(&self) -> Vec<usize> {
        (0..self.reps.len()).filter(|&m| self.identifiable[m]).collect()
    }
}

/// Solves the regularized normal equations
/// `(A^T A + ridge I) Theta = A^T Y` for the per-user representation matrix,
/// where `A` stacks the participation masks and `Y` the rescaled
/// observations. With `ridge = 0` a singular system is a rank-deficiency
/// error naming the users that were never observed.
pub fn estimate_representations(
    record: &ParticipationRecord,
    ridge: f64,
) -> Result<RepresentationMatrix> {
    if record.is_empty() {
        return Err(Error::Empty("participation record"));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Config(format!("ridge must be non-negative, got {ridge}")));
    }
    let m = record.num_users();
    let d = record.rows()[0].dim();
    let counts = record.participation_counts();
    let unidentifiable: Vec<usize> = (0..m).filter(|&u| counts[u] == 0).collect();

    let mut ata = DMatrix::<f64>::zeros(m, m);
    let mut aty = DMatrix::<f64>::zeros(m, d);
    for (mask, row) in record.masks().iter().zip(record.rows()) {
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            for j in 0..m {
                if mask[j] {
                    ata[(i, j)] += 1.0;
                }
            }
            for (k, v) in row.as_slice().iter().enumerate() {
                aty[(i, k)] += v;
            }
        }
    }
    if ridge > 0.0 {
        for i in 0..m {
            ata[(i, i)] += ridge;
        }
    }

    let chol = nalgebra::Cholesky::new(ata).ok_or(Error::RankDeficient { users: unidentifiable.clone() })?;
    let theta = chol.solve(&aty);

    let identifiable: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
    let reps: Vec<ModelVector> = (0..m)
        .map(|u| ModelVector::new(theta.row(u).iter().copied().collect()))
        .collect();
    Ok(RepresentationMatrix { reps, identifiable })
}

/// A hard assignment of users to clusters. Users without an identifiable
/// representation belong to no cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    assignment: Vec<Option<usize>>,
    num_clusters: usize,
}

impl Clustering {
    pub fn num_users(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn cluster_of(&self, user: usize) -> Option<usize> {
        self.assignment[user]
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&m| self.assignment[m] == Some(cluster))
            .collect()
    }

    pub fn assignment(&self) -> &[Option<usize>] {
        &self.assignment
    }
}

fn cosine_distance(a: &ModelVector, b: &ModelVector) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let cos = a.dot(b) / (na * nb);
    (1.0 - cos).clamp(0.0, 2.0)
}

/// Average-linkage agglomerative clustering of the identifiable users under
/// cosine distance. Merge ties break toward the smallest index pair. If fewer
/// identifiable users than requested clusters exist, the cluster count is
/// reduced with a warning.
pub fn cluster_users(reps: &RepresentationMatrix, num_clusters: usize) -> Result<Clustering> {
    if num_clusters == 0 {
        return Err(Error::Config("num_clusters must be at least 1".into()));
    }
    let ids = reps.identifiable_users();
    if ids.is_empty() {
        return Err(Error::Empty("identifiable users"));
    }
    let effective = if ids.len() < num_clusters {
        log::warn!(
            "only {} identifiable users for {} clusters; reducing to {}",
            ids.len(),
            num_clusters,
            ids.len()
        );
        ids.len()
    } else {
        num_clusters
    };

    // Slot state: slots stay sorted by smallest original member because a
    // merge lands in the lower slot.
    let mut members: Vec<Vec<usize>> = ids.iter().map(|&u| vec![u]).collect();
    let mut sizes: Vec<f64> = vec![1.0; ids.len()];
    let mut dist: Vec<Vec<f64>> = (0..ids.len())
        .map(|i| {
            (0..ids.len())
                .map(|j| cosine_distance(reps.rep(ids[i]), reps.rep(ids[j])))
                .collect()
        })
        .collect();

    while members.len() > effective {
        let n = members.len();
        let (mut bi, mut bj, mut bd) = (0, 1, f64::INFINITY);
        for i in 0..n {
            for j in (i + 1)..n {
                if dist[i][j] < bd {
                    bd = dist[i][j];
                    bi = i;
                    bj = j;
                }
            }
        }
        // Average-linkage update of slot bi, then removal of slot bj.
        let (si, sj) = (sizes[bi], sizes[bj]);
        for k in 0..n {
            if k == bi || k == bj {
                continue;
            }
            let d = (si * dist[bi][k] + sj * dist[bj][k]) / (si + sj);
            dist[bi][k] = d;
            dist[k][bi] = d;
        }
        sizes[bi] += sizes[bj];
        let moved = members.remove(bj);
        members[bi].extend(moved);
        sizes.remove(bj);
        dist.remove(bj);
        for row in dist.iter_mut() {
            row.remove(bj);
        }
    }

    let mut assignment = vec![None; reps.num_users()];
    for (c, group) in members.iter().enumerate() {
        for &u in group {
            assignment[u] = Some(c);
        }
    }
    Ok(Clustering { assignment, num_clusters: effective })
}

/// Schedules one uniformly random feasible member per cluster; clusters with
/// no feasible member contribute nobody this round.
pub fn schedule_clustered(
    feasible: &BTreeSet<usize>,
    clustering: &Clustering,
    seed: u64,
) -> BTreeSet<usize> {
    let mut rng = rng_from(seed, &[]);
    let mut scheduled = BTreeSet::new();
    for c in 0..clustering.num_clusters() {
        let candidates: Vec<usize> =
            clustering.members(c).into_iter().filter(|m| feasible.contains(m)).collect();
        if !candidates.is_empty() {
            scheduled.insert(candidates[rng.random_range(0..candidates.len())]);
        }
    }
    scheduled
}

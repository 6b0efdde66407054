//! Reputation of users and services.
//!
//! Entities of one kind are clustered with k-means; the largest cluster is
//! taken as the reliable population and its observations define a normal
//! band `(μ_r − 3σ_r, μ_r + 3σ_r)`. Every observation attributed to an
//! entity is positive feedback when it falls inside the band and negative
//! otherwise, giving counts `[po, ne]`.
//!
//! Reputation follows a binary logit choice model: with Gumbel noise on the
//! utilities of giving positive or negative feedback, the choice
//! probabilities are `p₁ = e^{β·po} / (e^{β·po} + e^{β·ne})` and
//! `p₂ = 1 − p₁`, and reputation is `p₁ / (p₁ + p₂)`. Since `p₁ + p₂ = 1`
//! that is the logistic function `1 / (1 + e^{−β(po − ne)})`, which is how
//! it is evaluated here.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::data::{EntityKind, QosMatrix};
use crate::error::{Error, Result};

/// Absolute tolerance for the positive band when `σ_r = 0`.
pub const DEGENERATE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RcmConfig {
    pub n_user_clusters: usize,
    pub n_service_clusters: usize,
    pub beta: f64,
    pub kmeans_max_iter: usize,
    /// Set from the experiment's master seed; not part of the JSON form.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for RcmConfig {
    fn default() -> Self {
        RcmConfig {
            n_user_clusters: 5,
            n_service_clusters: 15,
            beta: 0.05,
            kmeans_max_iter: 100,
            seed: 42,
        }
    }
}

impl RcmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_user_clusters == 0 || self.n_service_clusters == 0 {
            return Err(Error::Config("cluster counts must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.kmeans_max_iter == 0 {
            return Err(Error::Config("kmeans_max_iter must be at least 1".into()));
        }
        Ok(())
    }

    pub fn clusters_for(&self, kind: EntityKind) -> usize {
        match kind {
            EntityKind::User => self.n_user_clusters,
            EntityKind::Service => self.n_service_clusters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each assignment step, in iteration order.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterAssignment {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Stops at an assignment fixpoint or after `max_iter` assignment steps.
/// A cluster that loses all its points is re-seeded with the point farthest
/// from its current centroid.
pub fn kmeans(features: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<ClusterAssignment> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if k > features.len() {
        return Err(Error::Config(format!(
            "k = {k} exceeds the {} entities to cluster",
            features.len()
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Validation("feature vectors differ in length".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite clustering feature".into()));
    }

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(features, k, &mut rng);
    let mut labels = vec![usize::MAX; features.len()];
    let mut inertia_history = Vec::new();
    let mut iterations = 0;

    loop {
        iterations += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for (p, label) in features.iter().zip(labels.iter_mut()) {
            let (c, d) = nearest(p, &centroids);
            if c != *label {
                *label = c;
                changed = true;
            }
            inertia += d;
        }

        // Re-seed empty clusters from the worst-fitting points.
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        for empty in 0..k {
            if sizes[empty] > 0 {
                continue;
            }
            let far = features
                .iter()
                .zip(&labels)
                .enumerate()
                .filter(|(_, (_, &l))| sizes[l] > 1)
                .map(|(i, (p, &l))| (i, sq_dist(p, &centroids[l])))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((i, d)) = far {
                sizes[labels[i]] -= 1;
                labels[i] = empty;
                sizes[empty] = 1;
                centroids[empty] = features[i].clone();
                inertia -= d;
                changed = true;
            }
        }
        inertia_history.push(inertia.max(0.0));

        // Update step.
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &l) in features.iter().zip(&labels) {
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, sum) in sums.into_iter().enumerate() {
            if sizes[c] > 0 {
                centroids[c] = sum.into_iter().map(|s| s / sizes[c] as f64).collect();
            }
        }

        if !changed || iterations >= max_iter {
            break;
        }
    }

    let inertia = features
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum();
    Ok(ClusterAssignment {
        k,
        labels,
        centroids,
        inertia,
        inertia_history,
        iterations,
    })
}

fn kmeans_plus_plus(features: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut chosen = vec![rng.random_range(0..n as u64) as usize];
    let mut dist: Vec<f64> = features
        .iter()
        .map(|p| sq_dist(p, &features[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = dist.iter().rposition(|&d| d > 0.0).unwrap_or(n - 1);
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // Every point coincides with a chosen centre.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (d, p) in dist.iter_mut().zip(features) {
            *d = d.min(sq_dist(p, &features[next]));
        }
    }
    chosen.into_iter().map(|i| features[i].clone()).collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-entity `[mean, std]` of observed values before standardization.
pub fn raw_entity_features(m: &QosMatrix, kind: EntityKind) -> Vec<Vec<f64>> {
    let all: Vec<f64> = m.entries().iter().map(|e| e.value).collect();
    let global = if all.is_empty() { (0.0, 0.0) } else { mean_std(&all) };
    m.values_by(kind)
        .iter()
        .map(|v| {
            let (mean, std) = if v.is_empty() { global } else { mean_std(v) };
            vec![mean, std]
        })
        .collect()
}

/// Clustering features: per-entity `[mean, std]` of observations (global
/// statistics for entities with none), standardized per dimension.
pub fn entity_features(m: &QosMatrix, kind: EntityKind) -> Vec<Vec<f64>> {
    let mut features = raw_entity_features(m, kind);
    if features.is_empty() {
        return features;
    }
    for dim in 0..2 {
        let column: Vec<f64> = features.iter().map(|f| f[dim]).collect();
        let (mean, std) = mean_std(&column);
        for f in &mut features {
            f[dim] = if std > 0.0 { (f[dim] - mean) / std } else { 0.0 };
        }
    }
    features
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliableClusterStats {
    pub reliable_cluster_index: usize,
    pub cluster_size: usize,
    pub n_observations: usize,
    pub mu_r: f64,
    pub sigma_r: f64,
}

/// Picks the largest cluster (lowest index on ties) and the population mean
/// and standard deviation of every observation of its members.
pub fn reliable_cluster(a: &ClusterAssignment, m: &QosMatrix, kind: EntityKind) -> Result<ReliableClusterStats> {
    let n = m.entity_count(kind);
    if a.labels.len() != n {
        return Err(Error::Validation(format!(
            "assignment covers {} entities, matrix has {n} {}s",
            a.labels.len(),
            kind.as_str()
        )));
    }
    let sizes = a.cluster_sizes();
    let mut best = 0;
    for (c, &s) in sizes.iter().enumerate() {
        if s > sizes[best] {
            best = c;
        }
    }
    let values: Vec<f64> = m
        .values_by(kind)
        .into_iter()
        .zip(&a.labels)
        .filter(|(_, &l)| l == best)
        .flat_map(|(v, _)| v)
        .collect();
    if values.is_empty() {
        return Err(Error::DegenerateCluster(format!(
            "{} cluster {best} has no observations",
            kind.as_str()
        )));
    }
    let (mu_r, sigma_r) = mean_std(&values);
    Ok(ReliableClusterStats {
        reliable_cluster_index: best,
        cluster_size: sizes[best],
        n_observations: values.len(),
        mu_r,
        sigma_r,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackVector {
    pub po: u64,
    pub ne: u64,
}

/// Whether one observation counts as positive feedback.
pub fn is_positive(q: f64, stats: &ReliableClusterStats) -> bool {
    if stats.sigma_r == 0.0 {
        (q - stats.mu_r).abs() <= DEGENERATE_EPSILON
    } else {
        let half = 3.0 * stats.sigma_r;
        stats.mu_r - half < q && q < stats.mu_r + half
    }
}

/// Positive/negative counts per entity against the reliable band.
pub fn classify_feedback(m: &QosMatrix, stats: &ReliableClusterStats, kind: EntityKind) -> Vec<FeedbackVector> {
    m.values_by(kind)
        .iter()
        .map(|values| {
            let po = values.iter().filter(|&&q| is_positive(q, stats)).count() as u64;
            FeedbackVector {
                po,
                ne: values.len() as u64 - po,
            }
        })
        .collect()
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logit choice probabilities `(p₁, p₂)` of positive and negative feedback.
pub fn choice_probabilities(f: FeedbackVector, beta: f64) -> (f64, f64) {
    let p1 = logistic(beta * (f.po as f64 - f.ne as f64));
    let p2 = logistic(beta * (f.ne as f64 - f.po as f64));
    (p1, p2)
}

/// Reputation in `[0, 1]`; exactly 0.5 when `po == ne`.
pub fn reputation(f: FeedbackVector, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    // Counts can exceed 2^53 only in theory; the difference is exact below that.
    let diff = f.po as f64 - f.ne as f64;
    Ok(logistic(beta * diff))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityReputation {
    pub kind: EntityKind,
    pub index: usize,
    pub feedback: FeedbackVector,
    pub reputation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub kind: EntityKind,
    pub cluster_sizes: Vec<usize>,
    pub reliable: ReliableClusterStats,
    pub kmeans_iterations: usize,
    pub inertia: f64,
}

/// Reputations for all users and services of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ReputationTable {
    pub users: Vec<EntityReputation>,
    pub services: Vec<EntityReputation>,
    pub user_summary: KindSummary,
    pub service_summary: KindSummary,
}

impl ReputationTable {
    pub fn user_values(&self) -> Vec<f64> {
        self.users.iter().map(|r| r.reputation).collect()
    }

    pub fn service_values(&self) -> Vec<f64> {
        self.services.iter().map(|r| r.reputation).collect()
    }

    /// `kind,index,po,ne,reputation`, reputations with 12 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,index,po,ne,reputation\n");
        for r in self.users.iter().chain(&self.services) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.kind.as_str(),
                r.index,
                r.feedback.po,
                r.feedback.ne,
                format_significant(r.reputation, 12)
            ));
        }
        out
    }
}

/// Decimal rendering with `digits` significant digits.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (digits as i32 - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

fn reputations_for(m: &QosMatrix, kind: EntityKind, config: &RcmConfig) -> Result<(Vec<EntityReputation>, KindSummary)> {
    let features = entity_features(m, kind);
    let k = config.clusters_for(kind);
    let seed = config.seed ^ match kind {
        EntityKind::User => 0x5553_4552,
        EntityKind::Service => 0x5345_5256,
    };
    let assignment = kmeans(&features, k, seed, config.kmeans_max_iter)?;
    let stats = reliable_cluster(&assignment, m, kind)?;
    let feedback = classify_feedback(m, &stats, kind);
    let reps = feedback
        .into_iter()
        .enumerate()
        .map(|(index, fb)| {
            Ok(EntityReputation {
                kind,
                index,
                feedback: fb,
                reputation: reputation(fb, config.beta)?,
            })
        })
        .collect::<Result<_>>()?;
    let summary = KindSummary {
        kind,
        cluster_sizes: assignment.cluster_sizes(),
        reliable: stats,
        kmeans_iterations: assignment.iterations,
        inertia: assignment.inertia,
    };
    Ok((reps, summary))
}

/// Full reputation pass over a (training) matrix.
pub fn compute_reputations(m: &QosMatrix, config: &RcmConfig) -> Result<ReputationTable> {
    config.validate()?;
    if m.is_empty() {
        return Err(Error::Validation("reputation needs observations".into()));
    }
    let (users, user_summary) = reputations_for(m, EntityKind::User, config)?;
    let (services, service_summary) = reputations_for(m, EntityKind::Service, config)?;
    Ok(ReputationTable {
        users,
        services,
        user_summary,
        service_summary,
    })
}

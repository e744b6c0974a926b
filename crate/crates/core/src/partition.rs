//! Client-side data partitioning and the imbalance / concentration metrics
//! describing it.
//!
//! Splits are driven by per-class Dirichlet draws. The doubly-imbalanced
//! split ([`l2_partition`]) uses one concentration parameter for minority
//! classes and another for majority classes, and can sort each class's
//! sampled proportions in descending order before assignment so that the
//! same low-index clients hold the largest share of every class.

use crate::data::LabeledDataset;
use crate::error::{CoreError, Result};
use crate::rng::{self, stream};
use rand::seq::SliceRandom;
use rand_distr::{Dirichlet, Distribution};
use serde_json::{json, Value};

/// Class prior probabilities of a label multiset.
pub fn class_prior(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(CoreError::contract("class prior of an empty subset"));
    }
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(CoreError::contract(format!("label {} outside [0, {})", l, num_classes)));
        }
        counts[l] += 1;
    }
    let total = labels.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}

/// Ratio of the largest to the smallest class prior. Any zero entry makes
/// the degree infinite (a missing class is a modeled situation, not an
/// error).
pub fn imbalance_degree(prior: &[f64]) -> f64 {
    let max = prior.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = prior.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Reciprocal natural-log entropy of one class's across-client share
/// vector. A one-hot vector (single holder) has zero entropy and infinite
/// concentration.
pub fn concentration_degree(shares: &[f64]) -> f64 {
    let mut entropy = 0.0;
    for &p in shares {
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    if entropy == 0.0 {
        f64::INFINITY
    } else {
        1.0 / entropy
    }
}

/// Whether a share vector, already ordered by client data size, is monotone
/// non-decreasing (larger clients hold at least as much of the class).
pub fn is_concentrated(shares_in_size_order: &[f64]) -> bool {
    shares_in_size_order.windows(2).all(|w| w[0] <= w[1])
}

/// Configuration for the doubly-imbalanced split.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionConfig {
    pub clients: usize,
    /// Dirichlet concentration for minority classes.
    pub alpha_minor: f64,
    /// Dirichlet concentration for majority classes.
    pub alpha_major: f64,
    pub minor_classes: Vec<usize>,
    /// Sort each class's proportions descending before assignment.
    pub agglomerate: bool,
    pub seed: u64,
}

impl PartitionConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.clients < 2 {
            return Err(CoreError::config("partitioning needs at least 2 clients"));
        }
        if !(self.alpha_minor > 0.0) || !(self.alpha_major > 0.0) {
            return Err(CoreError::config("Dirichlet concentrations must be positive"));
        }
        if let Some(&bad) = self.minor_classes.iter().find(|&&c| c >= num_classes) {
            return Err(CoreError::config(format!(
                "minor class {} outside [0, {})",
                bad, num_classes
            )));
        }
        Ok(())
    }
}

/// A disjoint assignment of sample indices to clients plus the realized
/// per-class share matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionResult {
    /// Index sets per client; pairwise disjoint and covering the dataset.
    pub clients: Vec<Vec<usize>>,
    /// Realized class-by-client share matrix; each non-empty class row sums
    /// to 1.
    pub shares: Vec<Vec<f64>>,
    /// Classes with no samples at all (their share rows are zero).
    pub empty_classes: Vec<usize>,
}

/// Imbalance and concentration measurements of a split.
#[derive(Debug, Clone, PartialEq)]
pub struct ImbalanceReport {
    pub global_gamma: f64,
    /// Imbalance degree per client; infinite when the client misses a class
    /// (or holds no data at all).
    pub per_client_gamma: Vec<f64>,
    /// Concentration degree per class.
    pub per_class_conc: Vec<f64>,
}

/// Split one class's samples across clients with largest-remainder
/// allocation, preserving the total exactly. `proportions` must sum to 1.
fn allocate_counts(total: usize, proportions: &[f64]) -> Vec<usize> {
    let k = proportions.len();
    let mut counts: Vec<usize> = Vec::with_capacity(k);
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(k);
    let mut assigned = 0usize;
    for (i, &p) in proportions.iter().enumerate() {
        let raw = total as f64 * p;
        let base = raw.floor() as usize;
        counts.push(base);
        assigned += base;
        remainders.push((i, raw - base as f64));
    }
    // Largest remainder first; ties go to the lower client index.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(i, _) in remainders.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

fn dirichlet_proportions(alpha: f64, k: usize, rng: &mut rand_chacha::ChaCha12Rng) -> Result<Vec<f64>> {
    let dist = Dirichlet::new_with_size(alpha, k)
        .map_err(|e| CoreError::config(format!("invalid Dirichlet parameters: {e}")))?;
    Ok(dist.sample(rng))
}

fn partition_by_class(
    dataset: &LabeledDataset,
    clients: usize,
    alpha_for_class: impl Fn(usize) -> f64,
    agglomerate: bool,
    seed: u64,
) -> Result<PartitionResult> {
    if clients < 2 {
        return Err(CoreError::config("partitioning needs at least 2 clients"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut part_rng = rng::rng_for(seed, &[stream::PARTITION]);
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); clients];
    let mut shares: Vec<Vec<f64>> = Vec::with_capacity(dataset.num_classes);
    let mut empty_classes = Vec::new();
    for (c, indices) in by_class.iter_mut().enumerate() {
        if indices.is_empty() {
            empty_classes.push(c);
            shares.push(vec![0.0; clients]);
            continue;
        }
        let mut proportions = dirichlet_proportions(alpha_for_class(c), clients, &mut part_rng)?;
        if agglomerate {
            proportions.sort_by(|a, b| b.partial_cmp(a).unwrap());
        }
        let counts = allocate_counts(indices.len(), &proportions);
        indices.shuffle(&mut part_rng);
        let total = indices.len() as f64;
        let mut offset = 0usize;
        let mut row = Vec::with_capacity(clients);
        for (client, &count) in counts.iter().enumerate() {
            assignment[client].extend_from_slice(&indices[offset..offset + count]);
            offset += count;
            row.push(count as f64 / total);
        }
        shares.push(row);
    }
    for set in &mut assignment {
        set.sort_unstable();
    }
    Ok(PartitionResult { clients: assignment, shares, empty_classes })
}

/// Assign each class's samples to `clients` clients according to a fresh
/// symmetric Dirichlet draw per class.
pub fn dirichlet_partition(
    dataset: &LabeledDataset,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionResult> {
    if !(alpha > 0.0) {
        return Err(CoreError::config("Dirichlet concentration must be positive"));
    }
    partition_by_class(dataset, clients, |_| alpha, false, seed)
}

/// Doubly-imbalanced split: minority classes use `alpha_minor`, majority
/// classes `alpha_major`, with optional descending agglomeration, plus the
/// imbalance / concentration report of the realized assignment.
pub fn l2_partition(
    dataset: &LabeledDataset,
    config: &PartitionConfig,
) -> Result<(PartitionResult, ImbalanceReport)> {
    config.validate(dataset.num_classes)?;
    let minor = config.minor_classes.clone();
    let result = partition_by_class(
        dataset,
        config.clients,
        move |c| if minor.contains(&c) { config.alpha_minor } else { config.alpha_major },
        config.agglomerate,
        config.seed,
    )?;
    let report = imbalance_report(dataset, &result)?;
    Ok((result, report))
}

/// Measure a split: global imbalance, per-client imbalance, per-class
/// concentration.
pub fn imbalance_report(
    dataset: &LabeledDataset,
    partition: &PartitionResult,
) -> Result<ImbalanceReport> {
    let global_prior = class_prior(&dataset.labels, dataset.num_classes)?;
    let global_gamma = imbalance_degree(&global_prior);
    let per_client_gamma = partition
        .clients
        .iter()
        .map(|indices| {
            if indices.is_empty() {
                return f64::INFINITY;
            }
            let labels: Vec<usize> = indices.iter().map(|&i| dataset.labels[i]).collect();
            let prior = class_prior(&labels, dataset.num_classes).expect("non-empty");
            imbalance_degree(&prior)
        })
        .collect();
    let per_class_conc = partition.shares.iter().map(|row| concentration_degree(row)).collect();
    Ok(ImbalanceReport { global_gamma, per_client_gamma, per_class_conc })
}

fn float_to_json(v: f64) -> Value {
    if v.is_infinite() {
        json!("inf")
    } else {
        json!(v)
    }
}

fn float_from_json(v: &Value) -> Result<f64> {
    if let Some(s) = v.as_str() {
        if s == "inf" {
            return Ok(f64::INFINITY);
        }
        return Err(CoreError::data(format!("unexpected float sentinel {:?}", s)));
    }
    v.as_f64().ok_or_else(|| CoreError::data(format!("expected number, got {}", v)))
}

impl PartitionResult {
    pub fn to_json(&self) -> Value {
        json!({
            "clients": self.clients,
            "shares": self.shares,
        })
    }

    pub fn from_json(v: &Value) -> Result<PartitionResult> {
        let clients: Vec<Vec<usize>> = serde_json::from_value(
            v.get("clients").cloned().ok_or_else(|| CoreError::data("missing clients key"))?,
        )
        .map_err(|e| CoreError::data(format!("bad clients array: {e}")))?;
        let shares: Vec<Vec<f64>> = serde_json::from_value(
            v.get("shares").cloned().ok_or_else(|| CoreError::data("missing shares key"))?,
        )
        .map_err(|e| CoreError::data(format!("bad shares array: {e}")))?;
        let empty_classes = shares
            .iter()
            .enumerate()
            .filter(|(_, row)| row.iter().all(|&s| s == 0.0))
            .map(|(c, _)| c)
            .collect();
        Ok(PartitionResult { clients, shares, empty_classes })
    }
}

impl ImbalanceReport {
    pub fn to_json(&self) -> Value {
        json!({
            "global_gamma": float_to_json(self.global_gamma),
            "per_client_gamma": self.per_client_gamma.iter().cloned().map(float_to_json).collect::<Vec<_>>(),
            "per_class_conc": self.per_class_conc.iter().cloned().map(float_to_json).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(v: &Value) -> Result<ImbalanceReport> {
        let arr = |key: &str| -> Result<Vec<f64>> {
            v.get(key)
                .and_then(Value::as_array)
                .ok_or_else(|| CoreError::data(format!("missing {key} array")))?
                .iter()
                .map(float_from_json)
                .collect()
        };
        Ok(ImbalanceReport {
            global_gamma: float_from_json(
                v.get("global_gamma").ok_or_else(|| CoreError::data("missing global_gamma"))?,
            )?,
            per_client_gamma: arr("per_client_gamma")?,
            per_class_conc: arr("per_class_conc")?,
        })
    }
}

/// Check that a partition is a disjoint cover of `0..len`.
pub fn verify_cover(partition: &PartitionResult, len: usize) -> Result<()> {
    let mut seen = vec![false; len];
    for (client, indices) in partition.clients.iter().enumerate() {
        for &i in indices {
            if i >= len {
                return Err(CoreError::data(format!("client {} holds index {} >= {}", client, i, len)));
            }
            if seen[i] {
                return Err(CoreError::data(format!("index {} assigned twice", i)));
            }
            seen[i] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(CoreError::data(format!("index {} assigned to no client", missing)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;

    #[test]
    fn class_prior_from_counts() {
        let labels: Vec<usize> = std::iter::repeat(0).take(40).chain(std::iter::repeat(1).take(160)).collect();
        let p = class_prior(&labels, 2).unwrap();
        assert_eq!(p, vec![0.2, 0.8]);
    }

    #[test]
    fn class_prior_one_hot_and_uniform() {
        assert_eq!(class_prior(&[2, 2, 2], 4).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(class_prior(&[0, 1, 2, 3], 4).unwrap(), vec![0.25; 4]);
        assert!(class_prior(&[], 3).is_err());
    }

    #[test]
    fn imbalance_degree_cases() {
        assert_eq!(imbalance_degree(&[0.25, 0.25, 0.25, 0.25]), 1.0);
        // Seven-class count vector with max 1832 and min 32.
        let counts = [680.0, 1832.0, 211.0, 32.0, 475.0, 51.0, 82.0];
        let total: f64 = counts.iter().sum();
        let prior: Vec<f64> = counts.iter().map(|c| c / total).collect();
        assert!((imbalance_degree(&prior) - 57.25).abs() < 1e-9);
        // Zeros mean missing classes and an infinite degree.
        let with_zeros = [40.0 / 200.0, 160.0 / 200.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!(imbalance_degree(&with_zeros).is_infinite());
    }

    #[test]
    fn concentration_degree_cases() {
        let uniform4 = [0.25; 4];
        assert!((concentration_degree(&uniform4) - 1.0 / 4.0f64.ln()).abs() < 1e-12);
        let half = [0.5, 0.5, 0.0, 0.0];
        assert!((concentration_degree(&half) - 1.0 / 2.0f64.ln()).abs() < 1e-12);
        assert!(concentration_degree(&[1.0, 0.0, 0.0]).is_infinite());
    }

    #[test]
    fn concentration_floor_is_inverse_log_k() {
        // Uniform shares minimize concentration at 1 / ln K.
        for k in [2usize, 5, 20] {
            let shares = vec![1.0 / k as f64; k];
            let floor = 1.0 / (k as f64).ln();
            assert!((concentration_degree(&shares) - floor).abs() < 1e-12);
        }
    }

    #[test]
    fn concentrated_ordering_checks() {
        assert!(is_concentrated(&[0.1, 0.2, 0.3, 0.4]));
        assert!(!is_concentrated(&[0.4, 0.1, 0.3, 0.2]));
        assert!(is_concentrated(&[0.25, 0.25, 0.25, 0.25]));
    }

    #[test]
    fn allocation_conserves_totals() {
        let counts = allocate_counts(10, &[0.58, 0.39, 0.03]);
        assert_eq!(counts.iter().sum::<usize>(), 10);
        let counts = allocate_counts(1, &[0.2, 0.5, 0.3]);
        assert_eq!(counts.iter().sum::<usize>(), 1);
    }

    #[test]
    fn dirichlet_partition_is_disjoint_cover_and_deterministic() {
        let ds = make_blobs(4, 2, 30, 1.0, 3).unwrap();
        let a = dirichlet_partition(&ds, 5, 0.5, 11).unwrap();
        verify_cover(&a, ds.len()).unwrap();
        let b = dirichlet_partition(&ds, 5, 0.5, 11).unwrap();
        assert_eq!(a, b);
        for row in &a.shares {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn huge_alpha_approaches_uniform_shares() {
        let ds = make_blobs(3, 2, 400, 1.0, 8).unwrap();
        let k = 4usize;
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let part = dirichlet_partition(&ds, k, 1e6, seed).unwrap();
            for row in &part.shares {
                for &s in row {
                    worst = worst.max((s - 1.0 / k as f64).abs());
                }
            }
        }
        assert!(worst < 0.01, "max deviation from uniform {}", worst);
    }

    #[test]
    fn single_sample_class_lands_on_exactly_one_client() {
        let mut ds = make_blobs(2, 2, 10, 1.0, 5).unwrap();
        // Shrink class 1 to a single sample.
        let keep: Vec<usize> = ds
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 0)
            .map(|(i, _)| i)
            .chain(ds.labels.iter().position(|&l| l == 1))
            .collect();
        ds = ds.subset(&keep).unwrap();
        let part = dirichlet_partition(&ds, 2, 0.3, 7).unwrap();
        let holders: usize = part
            .clients
            .iter()
            .filter(|c| c.iter().any(|&i| ds.labels[i] == 1))
            .count();
        assert_eq!(holders, 1);
        verify_cover(&part, ds.len()).unwrap();
    }

    fn paper_style_config(seed: u64) -> PartitionConfig {
        PartitionConfig {
            clients: 20,
            alpha_minor: 50.0,
            alpha_major: 0.1,
            minor_classes: vec![5, 6],
            agglomerate: true,
            seed,
        }
    }

    #[test]
    fn agglomerated_shares_are_non_increasing() {
        let ds = make_blobs(7, 2, 120, 1.0, 2).unwrap();
        for seed in 0..20 {
            let (part, _) = l2_partition(&ds, &paper_style_config(seed)).unwrap();
            verify_cover(&part, ds.len()).unwrap();
            for row in &part.shares {
                assert!(row.windows(2).all(|w| w[0] >= w[1]), "seed {seed} row {row:?}");
            }
        }
    }

    #[test]
    fn smaller_alpha_concentrates_more() {
        let ds = make_blobs(5, 2, 200, 1.0, 13).unwrap();
        let mean_conc = |alpha: f64| -> f64 {
            let mut acc = 0.0;
            let mut n = 0usize;
            for seed in 0..20 {
                let part = dirichlet_partition(&ds, 20, alpha, seed).unwrap();
                for row in &part.shares {
                    acc += concentration_degree(row);
                    n += 1;
                }
            }
            acc / n as f64
        };
        let sharp = mean_conc(0.1);
        let smooth = mean_conc(50.0);
        assert!(
            sharp > smooth,
            "expected concentration to rise as alpha falls: {} vs {}",
            sharp,
            smooth
        );
    }

    #[test]
    fn report_round_trips_through_json_with_infinities() {
        let report = ImbalanceReport {
            global_gamma: 57.25,
            per_client_gamma: vec![1.5, f64::INFINITY],
            per_class_conc: vec![f64::INFINITY, 0.8],
        };
        let v = report.to_json();
        assert_eq!(v["per_client_gamma"][1], "inf");
        let back = ImbalanceReport::from_json(&v).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn partition_round_trips_through_json() {
        let ds = make_blobs(3, 2, 40, 1.0, 1).unwrap();
        let part = dirichlet_partition(&ds, 3, 1.0, 9).unwrap();
        let back = PartitionResult::from_json(&part.to_json()).unwrap();
        assert_eq!(part, back);
    }
}

//! Dataset generation, long-tailed subsampling, CSV ingestion, and the
//! two-view augmentation used by the contrastive objectives.

use crate::error::{CoreError, Result};
use crate::rng::{self, stream};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt::Write as _;
use std::path::Path;

/// In-memory labeled dataset with dense feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(CoreError::data(format!(
                "{} feature rows vs {} labels",
                features.len(),
                labels.len()
            )));
        }
        if features.is_empty() {
            return Err(CoreError::data("dataset is empty"));
        }
        let feature_dim = features[0].len();
        if features.iter().any(|f| f.len() != feature_dim) {
            return Err(CoreError::data("feature rows have unequal lengths"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(CoreError::data(format!(
                "label {} outside [0, {})",
                bad, num_classes
            )));
        }
        Ok(LabeledDataset { features, labels, num_classes, feature_dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-class sample counts, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Copy of the rows at `indices`, in the given order. Feature vectors
    /// are carried over bit-exactly.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let mut features = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let f = self
                .features
                .get(i)
                .ok_or_else(|| CoreError::data(format!("index {} out of bounds", i)))?;
            features.push(f.clone());
            labels.push(self.labels[i]);
        }
        LabeledDataset::new(features, labels, self.num_classes)
    }

    /// Split each class's samples into consecutive groups of the given
    /// sizes (dataset order within a class). Each class must hold at least
    /// `sum(group_sizes)` samples.
    pub fn split_per_class(&self, group_sizes: &[usize]) -> Result<Vec<LabeledDataset>> {
        let needed: usize = group_sizes.iter().sum();
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        for (c, idx) in by_class.iter().enumerate() {
            if idx.len() < needed {
                return Err(CoreError::data(format!(
                    "class {} has {} samples, split needs {}",
                    c,
                    idx.len(),
                    needed
                )));
            }
        }
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); group_sizes.len()];
        for idx in &by_class {
            let mut offset = 0;
            for (g, &size) in group_sizes.iter().enumerate() {
                groups[g].extend_from_slice(&idx[offset..offset + size]);
                offset += size;
            }
        }
        groups
            .into_iter()
            .map(|mut g| {
                g.sort_unstable();
                self.subset(&g)
            })
            .collect()
    }
}

/// Synthetic Gaussian-blob classification data. Class means are drawn from
/// a standard normal in feature space; samples scatter around their class
/// mean with standard deviation `cluster_spread`. Deterministic per seed.
pub fn make_blobs(
    num_classes: usize,
    feature_dim: usize,
    per_class_count: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if feature_dim < 2 {
        return Err(CoreError::config("blob features need dimension >= 2 to separate class means"));
    }
    if num_classes == 0 || per_class_count == 0 {
        return Err(CoreError::config("class count and per-class count must be positive"));
    }
    if !(cluster_spread > 0.0) {
        return Err(CoreError::config("cluster spread must be positive"));
    }
    let mut mean_rng = rng::rng_for(seed, &[stream::BLOB_MEANS]);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..feature_dim)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut mean_rng))
                .collect()
        })
        .collect();

    let mut sample_rng = rng::rng_for(seed, &[stream::BLOB_MEANS, 1]);
    let mut features = Vec::with_capacity(num_classes * per_class_count);
    let mut labels = Vec::with_capacity(num_classes * per_class_count);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class_count {
            let row: Vec<f64> = mean
                .iter()
                .map(|&m| {
                    m + cluster_spread
                        * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut sample_rng)
                })
                .collect();
            features.push(row);
            labels.push(c);
        }
    }
    LabeledDataset::new(features, labels, num_classes)
}

/// Shape of an exponentially decaying class-size profile with a gap between
/// a majority block and a minority block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LongTailSpec {
    pub num_classes: usize,
    pub num_max: usize,
    /// Ratio between the largest and the smallest class, >= 1.
    pub gamma: f64,
    /// Classes `0..major_count` are majority; the rest are minority.
    pub major_count: usize,
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(CoreError::config("long-tail profile needs at least 2 classes"));
        }
        if self.major_count == 0 || self.major_count >= self.num_classes {
            return Err(CoreError::config(format!(
                "major_count {} must lie in [1, {})",
                self.major_count, self.num_classes
            )));
        }
        if !(self.gamma >= 1.0) {
            return Err(CoreError::config("imbalance factor gamma must be >= 1"));
        }
        if self.num_max == 0 {
            return Err(CoreError::config("num_max must be positive"));
        }
        Ok(())
    }

    /// Label set of the minority block.
    pub fn minor_classes(&self) -> Vec<usize> {
        (self.major_count..self.num_classes).collect()
    }
}

/// Per-class sample counts under the decaying profile. With `L` classes and
/// 1-based class rank `c`, majority classes decay as
/// `num_max * gamma^(-(c-1)/(10L-1))` and minority classes as
/// `num_max * gamma^(-(c-1+9L)/(10L-1))`, floored to integers, so the first
/// class keeps `num_max` samples and the last receives `num_max / gamma` up
/// to flooring.
pub fn longtail_counts(spec: &LongTailSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let l = spec.num_classes as f64;
    let denom = 10.0 * l - 1.0;
    let mut counts = Vec::with_capacity(spec.num_classes);
    for c in 1..=spec.num_classes {
        let offset = if c <= spec.major_count { (c - 1) as f64 } else { (c - 1) as f64 + 9.0 * l };
        let raw = spec.num_max as f64 * spec.gamma.powf(-offset / denom);
        // Snap values a hair below an exact integer onto it before flooring;
        // powf can land one ulp under exact powers.
        counts.push((raw + 1e-9).floor() as usize);
    }
    Ok(counts)
}

/// Subsample `dataset` so per-class counts exactly match
/// [`longtail_counts`]. Selection without replacement, deterministic per
/// seed; the surviving rows keep dataset order.
pub fn subsample_longtail(
    dataset: &LabeledDataset,
    spec: &LongTailSpec,
    seed: u64,
) -> Result<LabeledDataset> {
    if spec.num_classes != dataset.num_classes {
        return Err(CoreError::config(format!(
            "profile covers {} classes, dataset has {}",
            spec.num_classes, dataset.num_classes
        )));
    }
    let targets = longtail_counts(spec)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut sub_rng = rng::rng_for(seed, &[stream::SUBSAMPLE]);
    let mut selected = Vec::new();
    for (c, want) in targets.iter().enumerate() {
        let pool = &mut by_class[c];
        if pool.len() < *want {
            return Err(CoreError::data(format!(
                "class {} has {} samples, long-tail profile needs {}",
                c,
                pool.len(),
                want
            )));
        }
        pool.shuffle(&mut sub_rng);
        selected.extend_from_slice(&pool[..*want]);
    }
    selected.sort_unstable();
    dataset.subset(&selected)
}

/// Read a dataset from a `label,f0,...,f{d-1}` CSV file. The class count is
/// inferred as `max label + 1`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text)
}

/// Parse the CSV dataset format from a string. Line numbers in errors are
/// 1-based and include the header.
pub fn parse_csv(text: &str) -> Result<LabeledDataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| CoreError::Parse { line: 1, detail: "empty file".into() })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "label" {
        return Err(CoreError::Parse {
            line: 1,
            detail: format!("header must be label,f0,...,f{{d-1}}, got {:?}", header),
        });
    }
    for (i, c) in cols[1..].iter().enumerate() {
        if *c != format!("f{}", i) {
            return Err(CoreError::Parse {
                line: 1,
                detail: format!("feature column {} named {:?}, expected f{}", i + 1, c, i),
            });
        }
    }
    let dim = cols.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(CoreError::Parse {
                line: line_no,
                detail: format!("expected {} fields, got {}", dim + 1, fields.len()),
            });
        }
        let label: usize = fields[0].trim().parse().map_err(|_| CoreError::Parse {
            line: line_no,
            detail: format!("label {:?} is not a non-negative integer", fields[0]),
        })?;
        let mut row = Vec::with_capacity(dim);
        for f in &fields[1..] {
            let v: f64 = f.trim().parse().map_err(|_| CoreError::Parse {
                line: line_no,
                detail: format!("feature {:?} is not a number", f),
            })?;
            row.push(v);
        }
        labels.push(label);
        features.push(row);
    }
    if labels.is_empty() {
        return Err(CoreError::data("CSV holds no data rows"));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    LabeledDataset::new(features, labels, num_classes)
}

/// Render a dataset in the CSV format accepted by [`load_csv`]. Floats use
/// the shortest round-trip representation, so write-then-load is exact.
pub fn to_csv(dataset: &LabeledDataset) -> String {
    let mut out = String::from("label");
    for i in 0..dataset.feature_dim {
        let _ = write!(out, ",f{}", i);
    }
    out.push('\n');
    for (row, &label) in dataset.features.iter().zip(&dataset.labels) {
        let _ = write!(out, "{}", label);
        for v in row {
            let _ = write!(out, ",{}", v);
        }
        out.push('\n');
    }
    out
}

pub fn save_csv(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_csv(dataset))?;
    Ok(())
}

/// A batch augmented into two stochastic views sharing labels.
#[derive(Debug, Clone)]
pub struct TwoViewBatch {
    pub view1: Vec<Vec<f64>>,
    pub view2: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Augment each sample twice with additive Gaussian noise followed by
/// independent per-feature zeroing. Deterministic per seed.
pub fn augment_two_views(
    features: &[Vec<f64>],
    labels: &[usize],
    noise_sigma: f64,
    dropout_p: f64,
    seed: u64,
) -> Result<TwoViewBatch> {
    if features.len() != labels.len() {
        return Err(CoreError::contract("feature and label counts differ"));
    }
    if !(noise_sigma >= 0.0) {
        return Err(CoreError::contract("noise sigma must be >= 0"));
    }
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(CoreError::contract("dropout probability must lie in [0, 1)"));
    }
    let mut aug_rng = rng::rng_for(seed, &[stream::AUGMENT]);
    let mut make_view = || -> Vec<Vec<f64>> {
        features
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&v| {
                        let noised = v
                            + noise_sigma
                                * <StandardNormal as Distribution<f64>>::sample(
                                    &StandardNormal,
                                    &mut aug_rng,
                                );
                        let drop: f64 = aug_rng.gen();
                        if drop < dropout_p {
                            0.0
                        } else {
                            noised
                        }
                    })
                    .collect()
            })
            .collect()
    };
    let view1 = make_view();
    let view2 = make_view();
    Ok(TwoViewBatch { view1, view2, labels: labels.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::imbalance_degree;

    #[test]
    fn blobs_have_expected_counts_and_labels() {
        let ds = make_blobs(2, 2, 5, 1.0, 7).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.class_counts(), vec![5, 5]);
    }

    #[test]
    fn blobs_are_deterministic_per_seed() {
        let a = make_blobs(3, 4, 8, 0.5, 42).unwrap();
        let b = make_blobs(3, 4, 8, 0.5, 42).unwrap();
        assert_eq!(a, b);
        let c = make_blobs(3, 4, 8, 0.5, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn blobs_reject_degenerate_dimensions() {
        assert!(make_blobs(2, 1, 5, 1.0, 0).is_err());
        assert!(make_blobs(2, 2, 5, 0.0, 0).is_err());
    }

    #[test]
    fn tiny_spread_is_nearest_centroid_separable() {
        let ds = make_blobs(4, 3, 20, 1e-9, 11).unwrap();
        // Empirical class centroids classify every sample.
        let counts = ds.class_counts();
        let mut centroids = vec![vec![0.0; ds.feature_dim]; ds.num_classes];
        for (row, &l) in ds.features.iter().zip(&ds.labels) {
            for (c, v) in centroids[l].iter_mut().zip(row) {
                *c += v;
            }
        }
        for (c, count) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= *count as f64;
            }
        }
        let mut per_class_hits = vec![0usize; ds.num_classes];
        for (row, &l) in ds.features.iter().zip(&ds.labels) {
            let pred = centroids
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = a.iter().zip(row).map(|(x, y)| (x - y) * (x - y)).sum();
                    let db: f64 = b.iter().zip(row).map(|(x, y)| (x - y) * (x - y)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            if pred == l {
                per_class_hits[l] += 1;
            }
        }
        let bacc: f64 = per_class_hits
            .iter()
            .zip(&counts)
            .map(|(&h, &n)| h as f64 / n as f64)
            .sum::<f64>()
            / ds.num_classes as f64;
        assert_eq!(bacc, 1.0);
    }

    fn cifar_like_spec() -> LongTailSpec {
        LongTailSpec { num_classes: 10, num_max: 5000, gamma: 10.0, major_count: 7 }
    }

    #[test]
    fn longtail_counts_match_direct_evaluation() {
        let counts = longtail_counts(&cifar_like_spec()).unwrap();
        assert_eq!(counts[0], 5000);
        assert_eq!(counts[9], 500);
        // class 8 (1-based): floor(5000 * 10^(-97/99))
        assert_eq!(counts[7], 523);
    }

    #[test]
    fn longtail_counts_are_non_increasing_with_bounded_ratio() {
        for gamma in [1.0, 3.0, 10.0, 50.0, 100.0] {
            for major in [1, 4, 7, 9] {
                let spec = LongTailSpec { num_classes: 10, num_max: 2000, gamma, major_count: major };
                let counts = longtail_counts(&spec).unwrap();
                assert!(counts.windows(2).all(|w| w[0] >= w[1]), "gamma {gamma} major {major}");
                let ratio = counts[0] as f64 / counts[9] as f64;
                let exact_min = 2000.0 / gamma;
                let floor_bound = 2000.0 / (exact_min - 1.0).max(1.0);
                assert!(ratio >= gamma - 1e-9 && ratio <= floor_bound + 1e-9);
            }
        }
    }

    #[test]
    fn longtail_rejects_bad_specs() {
        let mut s = cifar_like_spec();
        s.gamma = 0.5;
        assert!(longtail_counts(&s).is_err());
        let mut s = cifar_like_spec();
        s.major_count = 10;
        assert!(longtail_counts(&s).is_err());
    }

    #[test]
    fn subsample_hits_exact_counts_and_recovers_gamma() {
        let spec = LongTailSpec { num_classes: 5, num_max: 200, gamma: 10.0, major_count: 3 };
        let ds = make_blobs(5, 3, 200, 1.0, 5).unwrap();
        let sub = subsample_longtail(&ds, &spec, 9).unwrap();
        assert_eq!(sub.class_counts(), longtail_counts(&spec).unwrap());
        let counts = sub.class_counts();
        let total: usize = counts.iter().sum();
        let prior: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        let gamma = imbalance_degree(&prior);
        assert!((gamma - 10.0).abs() < 0.5, "recomputed gamma {}", gamma);
    }

    #[test]
    fn subsample_is_deterministic_and_selection_only() {
        let spec = LongTailSpec { num_classes: 3, num_max: 50, gamma: 5.0, major_count: 2 };
        let ds = make_blobs(3, 4, 60, 1.0, 21).unwrap();
        let a = subsample_longtail(&ds, &spec, 3).unwrap();
        let b = subsample_longtail(&ds, &spec, 3).unwrap();
        assert_eq!(a, b);
        for row in &a.features {
            assert!(ds.features.contains(row));
        }
    }

    #[test]
    fn subsample_names_the_starving_class() {
        let spec = LongTailSpec { num_classes: 3, num_max: 100, gamma: 2.0, major_count: 2 };
        let ds = make_blobs(3, 3, 60, 1.0, 2).unwrap();
        let err = subsample_longtail(&ds, &spec, 0).unwrap_err();
        assert!(err.to_string().contains("class 0"), "got: {err}");
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = make_blobs(3, 4, 7, 1.3, 17).unwrap();
        let text = to_csv(&ds);
        let back = parse_csv(&text).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn csv_parses_small_well_formed_file() {
        let ds = parse_csv("label,f0,f1\n0,1.5,2.5\n1,-1,0\n0,0.25,3\n").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.features[1], vec![-1.0, 0.0]);
    }

    #[test]
    fn csv_reports_offending_line() {
        let err = parse_csv("label,f0,f1\n0,1.0,2.0\n1,abc,0.5\n").unwrap_err();
        match err {
            CoreError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_bad_header() {
        assert!(parse_csv("x,f0\n0,1\n").is_err());
        assert!(parse_csv("label,f1,f0\n0,1,2\n").is_err());
    }

    #[test]
    fn identity_augmentation_reproduces_input() {
        let features = vec![vec![1.0, -2.0], vec![0.5, 3.0]];
        let batch = augment_two_views(&features, &[0, 1], 0.0, 0.0, 4).unwrap();
        assert_eq!(batch.view1, features);
        assert_eq!(batch.view2, features);
    }

    #[test]
    fn noisy_views_differ_and_are_seed_stable() {
        let features = vec![vec![1.0, -2.0], vec![0.5, 3.0]];
        let a = augment_two_views(&features, &[0, 1], 0.3, 0.1, 4).unwrap();
        assert_ne!(a.view1, a.view2);
        let b = augment_two_views(&features, &[0, 1], 0.3, 0.1, 4).unwrap();
        assert_eq!(a.view1, b.view1);
        assert_eq!(a.view2, b.view2);
    }
}

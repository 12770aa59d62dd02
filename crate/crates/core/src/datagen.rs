//! Synthetic datasets, device partitions and partial sample sharing.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, invalid, Error, Result};
use crate::nn::Batch;
use crate::rng::{stream, substream};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    label_count: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, dim: usize, labels: Vec<usize>, label_count: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dataset dimension must be positive"));
        }
        check_dim(labels.len() * dim, inputs.len())?;
        if let Some(&bad) = labels.iter().find(|&&y| y >= label_count) {
            return Err(invalid(format!("label {bad} outside [0, {label_count})")));
        }
        Ok(Dataset { inputs, dim, labels, label_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Fewer samples than labels; some classes must be missing or singletons.
    pub fn is_undersized(&self) -> bool {
        self.len() < self.label_count
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(invalid(format!("sample index {i} out of range")));
            }
            inputs.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        Batch::new(inputs, self.dim, labels)
    }

    pub fn full_batch(&self) -> Result<Batch> {
        Batch::new(self.inputs.clone(), self.dim, self.labels.clone())
    }

    pub fn label_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.label_count];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }

    /// Shannon entropy (nats) of the empirical label distribution.
    pub fn label_entropy(&self, indices: &[usize]) -> f64 {
        let n = indices.len() as f64;
        self.label_histogram(indices)
            .into_iter()
            .filter(|&c| c > 0)
            .map(|c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    }
}

fn blob_centers(labels: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..labels)
        .map(|i| {
            let mut c = vec![0.0; dim];
            if labels <= dim {
                c[i] = separation / std::f64::consts::SQRT_2;
            } else if dim >= 2 {
                let radius = separation / (2.0 * (std::f64::consts::PI / labels as f64).sin());
                let angle = 2.0 * std::f64::consts::PI * i as f64 / labels as f64;
                c[0] = radius * angle.cos();
                c[1] = radius * angle.sin();
            } else {
                c[0] = separation * i as f64;
            }
            c
        })
        .collect()
}

/// `labels` unit-covariance Gaussian clusters whose centers are pairwise at
/// least `separation` apart. Samples are stored class by class.
pub fn gen_blobs(labels: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if labels < 2 || per_class == 0 || dim == 0 {
        return Err(invalid("blobs need labels >= 2, per_class >= 1, dim >= 1"));
    }
    if !(separation > 0.0) {
        return Err(invalid("blob separation must be positive"));
    }
    let centers = blob_centers(labels, dim, separation);
    let mut rng = stream(seed, "blobs");
    let mut inputs = Vec::with_capacity(labels * per_class * dim);
    let mut ys = Vec::with_capacity(labels * per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                inputs.push(c + z);
            }
            ys.push(label);
        }
    }
    Dataset::new(inputs, dim, ys, labels)
}

/// Reads `d` feature columns followed by an integer label column. A first
/// row that does not parse as numbers is treated as a header.
pub fn load_csv(path: impl AsRef<Path>, label_count: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let fields: Vec<&str> = record.iter().map(str::trim).collect();
        if fields.len() < 2 {
            return Err(invalid(format!("csv row {row}: need at least one feature and a label")));
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            fields[..fields.len() - 1].iter().map(|f| f.parse::<f64>()).collect();
        let label = fields[fields.len() - 1].parse::<usize>();
        let (features, label) = match (parsed, label) {
            (Ok(f), Ok(l)) => (f, l),
            _ if row == 0 => continue,
            _ => return Err(invalid(format!("csv row {row}: unparseable values"))),
        };
        match dim {
            None => dim = Some(features.len()),
            Some(d) => check_dim(d, features.len())?,
        }
        inputs.extend(features);
        labels.push(label);
    }
    let dim = dim.ok_or(Error::Empty("csv dataset"))?;
    let label_count = match label_count {
        Some(l) => l,
        None => labels.iter().max().map_or(0, |m| m + 1).max(2),
    };
    Dataset::new(inputs, dim, labels, label_count)
}

/// Sample indices per device.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    /// Some label is held by no device.
    pub coverage_warning: bool,
    /// Assignments may overlap after [`share_fraction`].
    pub rectified: bool,
}

impl PartitionPlan {
    pub fn device_count(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_disjoint(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.assignments.iter().flatten() {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        true
    }
}

fn split_even(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Random disjoint shards whose sizes differ by at most one.
pub fn partition_iid(ds: &Dataset, devices: usize, seed: u64) -> Result<PartitionPlan> {
    if devices == 0 {
        return Err(invalid("need at least one device"));
    }
    if devices > ds.len() {
        return Err(invalid(format!("{devices} devices but only {} samples", ds.len())));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut stream(seed, "partition-iid"));
    Ok(PartitionPlan { assignments: split_even(&idx, devices), coverage_warning: false, rectified: false })
}

/// Device `i` holds labels `(i * k + j) mod L` for `j < k`; each label's
/// samples are split evenly among its holders.
pub fn partition_label_skew(
    ds: &Dataset,
    devices: usize,
    labels_per_device: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    let l = ds.label_count();
    if devices == 0 {
        return Err(invalid("need at least one device"));
    }
    if labels_per_device == 0 || labels_per_device > l {
        return Err(invalid(format!("labels_per_device must lie in [1, {l}]")));
    }
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); l];
    for dev in 0..devices {
        for j in 0..labels_per_device {
            let label = (dev * labels_per_device + j) % l;
            if !holders[label].contains(&dev) {
                holders[label].push(dev);
            }
        }
    }
    let mut assignments = vec![Vec::new(); devices];
    for (label, hs) in holders.iter().enumerate() {
        if hs.is_empty() {
            continue;
        }
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == label).collect();
        members.shuffle(&mut substream(seed, "partition-skew", &[label as u64]));
        for (dev, chunk) in hs.iter().zip(split_even(&members, hs.len())) {
            assignments[*dev].extend(chunk);
        }
    }
    Ok(PartitionPlan {
        assignments,
        coverage_warning: devices * labels_per_device < l,
        rectified: false,
    })
}

/// Every device additionally receives copies of `floor(p * n_j)` random
/// samples from each other device `j`. Draws for a (receiver, sender) pair
/// are prefixes of one seeded permutation, so holdings are nested in `p`.
pub fn share_fraction(ds: &Dataset, plan: &PartitionPlan, p: f64, seed: u64) -> Result<PartitionPlan> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("share fraction must lie in [0, 1], got {p}")));
    }
    if plan.assignments.iter().flatten().any(|&i| i >= ds.len()) {
        return Err(invalid("partition references samples outside the dataset"));
    }
    let m = plan.device_count();
    let mut assignments = plan.assignments.clone();
    for (i, holding) in assignments.iter_mut().enumerate() {
        for j in (0..m).filter(|&j| j != i) {
            let donor = &plan.assignments[j];
            let take = (p * donor.len() as f64).floor() as usize;
            if take == 0 {
                continue;
            }
            let mut perm = donor.clone();
            perm.shuffle(&mut substream(seed, "share", &[i as u64, j as u64]));
            holding.extend_from_slice(&perm[..take]);
        }
    }
    Ok(PartitionPlan { assignments, coverage_warning: plan.coverage_warning, rectified: p > 0.0 || plan.rectified })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn tiny_blob_counts() {
        let ds = gen_blobs(2, 1, 3, 1.0, 0).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[0, 1]);
    }

    #[test]
    fn blob_centers_are_separated() {
        for (l, d) in [(3, 5), (10, 2), (4, 1)] {
            let cs = blob_centers(l, d, 4.0);
            for a in 0..l {
                for b in a + 1..l {
                    let dist: f64 = cs[a].iter().zip(&cs[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                    assert!(dist >= 4.0 - 1e-9);
                }
            }
        }
    }

    #[test]
    fn well_separated_blobs_are_nearest_centroid_separable() {
        let ds = gen_blobs(4, 200, 2, 10.0, 42).unwrap();
        let mut centroids = vec![vec![0.0; 2]; 4];
        let counts = ds.label_histogram(&(0..ds.len()).collect::<Vec<_>>());
        for i in 0..ds.len() {
            for k in 0..2 {
                centroids[ds.label(i)][k] += ds.input(i)[k] / counts[ds.label(i)] as f64;
            }
        }
        let correct = (0..ds.len())
            .filter(|&i| {
                let x = ds.input(i);
                let best = (0..4)
                    .min_by(|&a, &b| {
                        let da: f64 = (0..2).map(|k| (x[k] - centroids[a][k]).powi(2)).sum();
                        let db: f64 = (0..2).map(|k| (x[k] - centroids[b][k]).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                best == ds.label(i)
            })
            .count();
        assert!(correct as f64 / ds.len() as f64 >= 0.99);
    }

    #[test]
    fn blobs_are_deterministic() {
        assert_eq!(gen_blobs(3, 20, 4, 2.0, 9).unwrap(), gen_blobs(3, 20, 4, 2.0, 9).unwrap());
    }

    #[test]
    fn iid_partition_shapes() {
        let ds = gen_blobs(2, 5, 2, 1.0, 1).unwrap();
        let one = partition_iid(&ds, 1, 3).unwrap();
        let mut all = one.assignments[0].clone();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let two = partition_iid(&ds, 2, 3).unwrap();
        assert_eq!(two.assignments.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 5]);
        assert!(two.is_disjoint(10));
        assert!(partition_iid(&ds, 11, 3).is_err());
    }

    #[test]
    fn iid_partition_tracks_global_label_proportions() {
        let ds = gen_blobs(4, 2500, 2, 1.0, 5).unwrap();
        let plan = partition_iid(&ds, 10, 6).unwrap();
        for shard in &plan.assignments {
            let h = ds.label_histogram(shard);
            for c in h {
                let frac = c as f64 / shard.len() as f64;
                assert!((frac - 0.25).abs() / 0.25 < 0.15);
            }
        }
    }

    #[test]
    fn label_skew_one_label_per_device() {
        let ds = gen_blobs(10, 30, 2, 3.0, 2).unwrap();
        let plan = partition_label_skew(&ds, 10, 1, 4).unwrap();
        for (dev, shard) in plan.assignments.iter().enumerate() {
            assert_eq!(shard.len(), 30);
            assert!(shard.iter().all(|&i| ds.label(i) == dev));
        }
        assert!(plan.is_disjoint(ds.len()));
        assert!(!plan.coverage_warning);
        assert!(partition_label_skew(&ds, 3, 1, 4).unwrap().coverage_warning);
    }

    #[test]
    fn label_skew_with_full_support_covers_every_label() {
        let ds = gen_blobs(5, 40, 2, 3.0, 2).unwrap();
        let plan = partition_label_skew(&ds, 4, 5, 4).unwrap();
        for shard in &plan.assignments {
            assert!(ds.label_histogram(shard).iter().all(|&c| c > 0));
        }
        assert!(plan.is_disjoint(ds.len()));
    }

    #[test]
    fn label_skew_lowers_entropy() {
        let ds = gen_blobs(6, 50, 2, 3.0, 2).unwrap();
        let global = ds.label_entropy(&(0..ds.len()).collect::<Vec<_>>());
        assert!((global - 6f64.ln()).abs() < 1e-12);
        let plan = partition_label_skew(&ds, 6, 2, 1).unwrap();
        for shard in &plan.assignments {
            assert!(ds.label_entropy(shard) < global);
        }
    }

    #[test]
    fn share_fraction_counts() {
        let ds = gen_blobs(10, 100, 2, 3.0, 2).unwrap();
        let plan = partition_iid(&ds, 10, 1).unwrap();
        assert_eq!(share_fraction(&ds, &plan, 0.0, 5).unwrap().assignments, plan.assignments);
        let shared = share_fraction(&ds, &plan, 0.05, 5).unwrap();
        for (orig, new) in plan.assignments.iter().zip(&shared.assignments) {
            assert_eq!(new.len(), orig.len() + 45);
            assert_eq!(&new[..orig.len()], orig.as_slice());
        }
        let two = partition_iid(&ds, 2, 1).unwrap();
        let full = share_fraction(&ds, &two, 1.0, 5).unwrap();
        for shard in &full.assignments {
            let set: HashSet<usize> = shard.iter().copied().collect();
            assert_eq!(set.len(), ds.len());
        }
        assert!(share_fraction(&ds, &plan, 1.5, 5).is_err());
    }

    #[test]
    fn csv_loader_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "x0,x1,label\n0.5,1.5,0\n-1,2,2\n").unwrap();
        let ds = load_csv(&path, None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.label_count(), 3);
        assert_eq!(ds.input(1), &[-1.0, 2.0]);
        std::fs::write(&path, "0.5,1.5,0\n-1,2,1\n").unwrap();
        assert_eq!(load_csv(&path, Some(4)).unwrap().label_count(), 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn share_fraction_is_nested(p1 in 0.0f64..1.0, p2 in 0.0f64..1.0, seed in 0u64..1000) {
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            let ds = gen_blobs(3, 20, 2, 2.0, seed).unwrap();
            let plan = partition_iid(&ds, 4, seed).unwrap();
            let a = share_fraction(&ds, &plan, lo, seed).unwrap();
            let b = share_fraction(&ds, &plan, hi, seed).unwrap();
            for (sa, sb) in a.assignments.iter().zip(&b.assignments) {
                let set: HashSet<usize> = sb.iter().copied().collect();
                prop_assert!(sa.iter().all(|i| set.contains(i)));
            }
        }
    }
}

//! Synthetic datasets, heterogeneous client partitioning, label noise and
//! calibration splits.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseArray;

/// N x d inputs with class labels in [0, K).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    inputs: DenseArray,
    labels: Vec<usize>,
    n_classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: DenseArray, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::contract(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::contract(format!(
                "label {} out of {} classes",
                bad, n_classes
            )));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn inputs(&self) -> &DenseArray {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input_row(&self, i: usize) -> &[f64] {
        self.inputs.row_slice(i)
    }

    /// Subset by indices (copying).
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(format!("index {} out of range", i)));
            }
            data.extend_from_slice(self.input_row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset::new(
            DenseArray::matrix(indices.len(), d, data)?,
            labels,
            self.n_classes,
        )
    }

    /// Classes that actually occur.
    pub fn present_classes(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    /// Empirical class proportions (zero for absent classes).
    pub fn class_proportions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        let n = self.len().max(1) as f64;
        counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Columnar text format: header `d K N`, one `features... label` row per
    /// sample. Floats are written in shortest round-trip form.
    pub fn write_text(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{} {} {}", self.dim(), self.n_classes, self.len())?;
        for i in 0..self.len() {
            let feats: Vec<String> = self.input_row(i).iter().map(|v| format!("{}", v)).collect();
            writeln!(w, "{} {}", feats.join(" "), self.labels[i])?;
        }
        Ok(())
    }

    pub fn read_text(r: impl BufRead) -> Result<LabeledDataset> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Serialization("empty dataset file".into()))??;
        let head: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Serialization(format!("bad dataset header: {}", e)))?;
        if head.len() != 3 {
            return Err(Error::Serialization("dataset header needs d K N".into()));
        }
        let (d, k, n) = (head[0], head[1], head[2]);
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for line in lines.take(n) {
            let line = line?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != d + 1 {
                return Err(Error::Serialization(format!(
                    "expected {} columns, got {}",
                    d + 1,
                    toks.len()
                )));
            }
            for t in &toks[..d] {
                data.push(
                    t.parse()
                        .map_err(|e| Error::Serialization(format!("bad feature: {}", e)))?,
                );
            }
            labels.push(
                toks[d]
                    .parse()
                    .map_err(|e| Error::Serialization(format!("bad label: {}", e)))?,
            );
        }
        if labels.len() != n {
            return Err(Error::Serialization("dataset truncated".into()));
        }
        LabeledDataset::new(DenseArray::matrix(n, d, data)?, labels, k)
    }
}

/// Three 2-d Gaussians (sigma 0.1): left all class 0, right all class 1,
/// middle carrying every label uniformly -- the high-aleatoric cluster.
pub fn gen_toy_three_clusters(
    n_per_cluster: usize,
    n_classes: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    gen_toy_three_clusters_at(
        n_per_cluster,
        n_classes,
        [[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0]],
        seed,
    )
}

/// Toy generator with configurable cluster centers (middle cluster is the
/// second entry).
pub fn gen_toy_three_clusters_at(
    n_per_cluster: usize,
    n_classes: usize,
    centers: [[f64; 2]; 3],
    seed: u64,
) -> Result<LabeledDataset> {
    if n_per_cluster == 0 {
        return Err(Error::contract("n_per_cluster must be positive"));
    }
    if n_classes < 2 {
        return Err(Error::contract("toy clusters need K >= 2"));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let mut data = Vec::with_capacity(3 * n_per_cluster * 2);
    let mut labels = Vec::with_capacity(3 * n_per_cluster);
    for (cluster, center) in centers.iter().enumerate() {
        for _ in 0..n_per_cluster {
            data.push(center[0] + noise.sample(&mut rng));
            data.push(center[1] + noise.sample(&mut rng));
            let label = match cluster {
                0 => 0,
                2 => 1,
                _ => rng.gen_range(0..n_classes),
            };
            labels.push(label);
        }
    }
    LabeledDataset::new(
        DenseArray::matrix(3 * n_per_cluster, 2, data)?,
        labels,
        n_classes,
    )
}

/// K isotropic Gaussian blobs; centers sit on a circle of the given radius
/// in the first two coordinates, remaining coordinates are zero-centered.
pub fn gen_blobs(
    n_classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    sigma: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    gen_blobs_rotated(n_classes, n_per_class, dim, separation, sigma, 0.0, seed)
}

/// `gen_blobs` with the center ring rotated by `angle_offset` radians;
/// used to place out-of-distribution rings between in-distribution
/// directions.
pub fn gen_blobs_rotated(
    n_classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    sigma: f64,
    angle_offset: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_classes < 2 {
        return Err(Error::contract("blobs need K >= 2"));
    }
    if dim < 2 {
        return Err(Error::contract("blobs need at least 2 dimensions"));
    }
    if separation < 0.0 || sigma <= 0.0 {
        return Err(Error::contract("separation must be >= 0 and sigma > 0"));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("valid normal");
    let mut data = Vec::with_capacity(n_classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(n_classes * n_per_class);
    for c in 0..n_classes {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / n_classes as f64 + angle_offset;
        let cx = separation * angle.cos();
        let cy = separation * angle.sin();
        for _ in 0..n_per_class {
            for j in 0..dim {
                let center = match j {
                    0 => cx,
                    1 => cy,
                    _ => 0.0,
                };
                data.push(center + noise.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(
        DenseArray::matrix(n_classes * n_per_class, dim, data)?,
        labels,
        n_classes,
    )
}

/// Centers of `gen_blobs` for oracle checks.
pub fn blob_centers(n_classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..n_classes)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / n_classes as f64;
            let mut center = vec![0.0; dim];
            center[0] = separation * angle.cos();
            center[1] = separation * angle.sin();
            center
        })
        .collect()
}

/// Disjoint per-client index lists with per-client class subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    client_indices: Vec<Vec<usize>>,
    client_classes: Vec<BTreeSet<usize>>,
}

impl ClientPartition {
    pub fn n_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn indices(&self, client: usize) -> &[usize] {
        &self.client_indices[client]
    }

    pub fn classes(&self, client: usize) -> &BTreeSet<usize> {
        &self.client_classes[client]
    }
}

/// Assign each client a class subset (size drawn from `classes_per_client`)
/// and split every class's samples evenly among its holders.
///
/// Class-set sizes and per-class holder counts are balanced so client sizes
/// stay within +-20% of the mean.
pub fn partition_heterogeneous(
    ds: &LabeledDataset,
    n_clients: usize,
    classes_per_client: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<ClientPartition> {
    let k = ds.n_classes();
    let (lo, hi) = (*classes_per_client.start(), *classes_per_client.end());
    if n_clients == 0 {
        return Err(Error::contract("need at least one client"));
    }
    if lo == 0 || hi > k || lo > hi {
        return Err(Error::contract(format!(
            "classes-per-client range {}..={} invalid for K={}",
            lo, hi, k
        )));
    }
    if n_clients * hi < k {
        return Err(Error::contract(format!(
            "{} clients with at most {} classes cannot cover {} classes",
            n_clients, hi, k
        )));
    }
    let mut rng = StdRng::seed_from_u64(seed);

    // Balanced class-set sizes: cycle through the range, shuffled over
    // clients.
    let mut sizes: Vec<usize> = (0..n_clients).map(|i| lo + (i % (hi - lo + 1))).collect();
    sizes.shuffle(&mut rng);
    while sizes.iter().sum::<usize>() < k {
        // Grow the smallest entries until coverage is feasible.
        let i = sizes
            .iter()
            .enumerate()
            .min_by_key(|(_, &s)| s)
            .map(|(i, _)| i)
            .expect("non-empty");
        if sizes[i] >= k {
            return Err(Error::contract("cannot cover all classes"));
        }
        sizes[i] += 1;
    }
    let total_slots: usize = sizes.iter().sum();

    // Deal classes into slots as evenly as possible: each class appears
    // floor or ceil of total_slots/K times, never twice on one client.
    let mut class_counts = vec![total_slots / k; k];
    for extra in 0..total_slots % k {
        class_counts[extra] += 1;
    }
    let mut client_classes: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_clients];
    let mut class_order: Vec<usize> = (0..k).collect();
    class_order.shuffle(&mut rng);
    for &c in &class_order {
        for _ in 0..class_counts[c] {
            // Most-free-slots-first keeps the deal feasible.
            let candidate = (0..n_clients)
                .filter(|&i| !client_classes[i].contains(&c) && client_classes[i].len() < sizes[i])
                .max_by_key(|&i| sizes[i] - client_classes[i].len());
            match candidate {
                Some(i) => {
                    client_classes[i].insert(c);
                }
                None => {
                    return Err(Error::contract(
                        "could not place every class copy; relax the range",
                    ));
                }
            }
        }
    }

    // Every class must have at least one holder.
    for c in 0..k {
        if !client_classes.iter().any(|set| set.contains(&c)) {
            return Err(Error::contract(format!("class {} uncovered", c)));
        }
    }

    // Split each class's samples evenly among its holders.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut client_indices: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for c in 0..k {
        let holders: Vec<usize> = (0..n_clients)
            .filter(|&i| client_classes[i].contains(&c))
            .collect();
        let mut pool = by_class[c].clone();
        pool.shuffle(&mut rng);
        for (j, &idx) in pool.iter().enumerate() {
            client_indices[holders[j % holders.len()]].push(idx);
        }
    }
    for list in &mut client_indices {
        list.sort_unstable();
    }

    Ok(ClientPartition {
        client_indices,
        client_classes,
    })
}

/// Relabel samples of the noisy classes uniformly within the noisy set;
/// clean classes stay untouched. An empty noisy set is the identity.
pub fn inject_label_noise(
    ds: &LabeledDataset,
    noisy_classes: &BTreeSet<usize>,
    seed: u64,
) -> Result<LabeledDataset> {
    if let Some(&bad) = noisy_classes.iter().find(|&&c| c >= ds.n_classes()) {
        return Err(Error::contract(format!(
            "noisy class {} out of {} classes",
            bad,
            ds.n_classes()
        )));
    }
    if noisy_classes.is_empty() {
        return Ok(ds.clone());
    }
    let noisy: Vec<usize> = noisy_classes.iter().copied().collect();
    let mut rng = StdRng::seed_from_u64(seed);
    let labels: Vec<usize> = ds
        .labels()
        .iter()
        .map(|&y| {
            if noisy_classes.contains(&y) {
                noisy[rng.gen_range(0..noisy.len())]
            } else {
                y
            }
        })
        .collect();
    LabeledDataset::new(ds.inputs().clone(), labels, ds.n_classes())
}

/// Train/validation fractions; the calibration share defaults to the 40%
/// side of the 40/60 validation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub calibration_share: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.7,
            validation_fraction: 0.3,
            calibration_share: 0.4,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| f > 0.0 && f < 1.0;
        if !ok(self.train_fraction) || !ok(self.validation_fraction) || !ok(self.calibration_share)
        {
            return Err(Error::config("split fractions must lie in (0,1)"));
        }
        if (self.train_fraction + self.validation_fraction - 1.0).abs() > 1e-9 {
            return Err(Error::config("train + validation fractions must sum to 1"));
        }
        Ok(())
    }
}

/// Index sets of one dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub calibration: Vec<usize>,
    pub evaluation: Vec<usize>,
}

/// Shuffle-split into train / calibration / held-out evaluation.
/// Calibration keeps only classes that occur in the train part.
pub fn split(ds: &LabeledDataset, spec: &SplitSpec, seed: u64) -> Result<DatasetSplit> {
    spec.validate()?;
    if ds.len() < 3 {
        return Err(Error::contract("dataset too small to split"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = StdRng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = ((ds.len() as f64) * spec.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, ds.len() - 2);
    let (train, val) = order.split_at(n_train);
    let n_cal = ((val.len() as f64) * spec.calibration_share).round() as usize;
    let n_cal = n_cal.clamp(1, val.len() - 1);
    let train_classes: BTreeSet<usize> = train.iter().map(|&i| ds.labels()[i]).collect();

    // Fill calibration with train-class samples first; spillover goes to
    // evaluation.
    let mut calibration = Vec::with_capacity(n_cal);
    let mut evaluation = Vec::new();
    for &i in val {
        if calibration.len() < n_cal && train_classes.contains(&ds.labels()[i]) {
            calibration.push(i);
        } else {
            evaluation.push(i);
        }
    }
    if calibration.is_empty() || evaluation.is_empty() {
        return Err(Error::contract("split produced an empty part"));
    }
    let mut train = train.to_vec();
    train.sort_unstable();
    calibration.sort_unstable();
    evaluation.sort_unstable();
    Ok(DatasetSplit {
        train,
        calibration,
        evaluation,
    })
}

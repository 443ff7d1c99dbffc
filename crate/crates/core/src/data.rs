//! Labeled feature datasets: synthetic multi-cluster generation, CSV I/O and
//! disjoint-class train/test splits.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{normalize, rng_for, streams};
use crate::{Error, Result};

/// Parameters of a Gaussian mixture where every class owns several clusters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub num_classes: usize,
    pub clusters_per_class: usize,
    pub points_per_cluster: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation around each cluster mean.
    pub sigma: f64,
    /// Norm of every cluster mean.
    pub scale: f64,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            clusters_per_class: 3,
            points_per_cluster: 34,
            dim: 32,
            sigma: 0.35,
            scale: 1.0,
            seed: 0,
        }
    }
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.clusters_per_class == 0 || self.points_per_cluster == 0 || self.dim == 0 {
            return Err(Error::contract("cluster spec counts must be positive"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::contract(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::contract(format!("scale must be > 0, got {}", self.scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f64>>,
    /// Dense class ids in `[0, num_classes)`.
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Vec<Split>,
    /// Ground-truth cluster of each point, when known.
    pub cluster_ids: Option<Vec<usize>>,
}

impl LabeledDataset {
    /// All rows are marked [`Split::Train`].
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::contract("dataset is empty"));
        }
        if features.len() != labels.len() {
            return Err(Error::contract("features and labels differ in length"));
        }
        let dim = features[0].len();
        if dim == 0 || features.iter().any(|f| f.len() != dim) {
            return Err(Error::contract("features must share a positive dimension"));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        let split = vec![Split::Train; labels.len()];
        Ok(Self {
            features,
            labels,
            num_classes,
            split,
            cluster_ids: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Classes present in `split`, ascending.
    pub fn classes_in(&self, split: Split) -> Vec<usize> {
        let mut seen: Vec<usize> = self
            .labels
            .iter()
            .zip(&self.split)
            .filter(|(_, s)| **s == split)
            .map(|(l, _)| *l)
            .collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    /// The rows of `split`, with labels re-indexed densely in ascending order
    /// of the original class id.
    pub fn subset(&self, split: Split) -> Result<LabeledDataset> {
        let classes = self.classes_in(split);
        if classes.is_empty() {
            return Err(Error::contract(format!("no rows in the {split:?} split")));
        }
        let remap: HashMap<usize, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        let rows: Vec<usize> = (0..self.len()).filter(|i| self.split[*i] == split).collect();
        Ok(LabeledDataset {
            features: rows.iter().map(|i| self.features[*i].clone()).collect(),
            labels: rows.iter().map(|i| remap[&self.labels[*i]]).collect(),
            num_classes: classes.len(),
            split: vec![split; rows.len()],
            cluster_ids: self
                .cluster_ids
                .as_ref()
                .map(|ids| rows.iter().map(|i| ids[*i]).collect()),
        })
    }
}

/// Samples a dataset from `spec`, class by class and cluster by cluster.
pub fn generate_synthetic(spec: &ClusterSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, streams::DATA);
    let n = spec.num_classes * spec.clusters_per_class * spec.points_per_cluster;
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut cluster_ids = Vec::with_capacity(n);
    for class in 0..spec.num_classes {
        for g in 0..spec.clusters_per_class {
            let direction: Vec<f64> = loop {
                let v: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
                if let Ok(u) = normalize(&v) {
                    break u.into_inner();
                }
            };
            let mean: Vec<f64> = direction.iter().map(|v| v * spec.scale).collect();
            for _ in 0..spec.points_per_cluster {
                let point = mean
                    .iter()
                    .map(|m| {
                        let z: f64 = rng.sample(StandardNormal);
                        m + spec.sigma * z
                    })
                    .collect();
                features.push(point);
                labels.push(class);
                cluster_ids.push(class * spec.clusters_per_class + g);
            }
        }
    }
    Ok(LabeledDataset {
        features,
        labels,
        num_classes: spec.num_classes,
        split: vec![Split::Train; n],
        cluster_ids: Some(cluster_ids),
    })
}

/// Parses `label,feat_1,...,feat_D` rows. A first line whose first field is
/// not numeric is treated as a header. Labels are re-indexed densely in order
/// of first appearance.
pub fn read_csv<R: Read>(reader: R) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    let mut width: Option<usize> = None;
    let mut first = true;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if first {
            first = false;
            if record.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
                continue;
            }
        }
        let parse_err = |message: String| Error::Parse { line, message };
        if record.len() < 2 {
            return Err(parse_err("row needs a label and at least one feature".into()));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_err(format!(
                    "ragged row: {} fields, expected {w}",
                    record.len()
                )))
            }
            _ => {}
        }
        let label: i64 = record[0]
            .parse()
            .map_err(|_| parse_err(format!("label '{}' is not an integer", &record[0])))?;
        let row = record
            .iter()
            .skip(1)
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(format!("feature '{f}' is not a finite number"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        raw_labels.push(label);
        features.push(row);
    }
    if features.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "no data rows".into(),
        });
    }
    let mut dense: HashMap<i64, usize> = HashMap::new();
    let labels = raw_labels
        .iter()
        .map(|l| {
            let next = dense.len();
            *dense.entry(*l).or_insert(next)
        })
        .collect();
    LabeledDataset::new(features, labels)
}

pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    read_csv(File::open(path)?)
}

pub fn write_csv<W: Write>(ds: &LabeledDataset, w: &mut W) -> std::io::Result<()> {
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((1..=ds.dim()).map(|i| format!("f{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (label, row) in ds.labels.iter().zip(&ds.features) {
        write!(w, "{label}")?;
        for v in row {
            write!(w, ",{v:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn save_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_csv(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

/// One ground-truth cluster id per row, under a `cluster` header.
pub fn save_cluster_sidecar(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let ids = ds
        .cluster_ids
        .as_ref()
        .ok_or_else(|| Error::contract("dataset carries no cluster ids"))?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "cluster")?;
    for id in ids {
        writeln!(w, "{id}")?;
    }
    w.flush()?;
    Ok(())
}

/// Partitions classes (not rows) into train and test.
///
/// `round(train_fraction · C)` classes, chosen by a seeded shuffle, go to
/// training; the rest are held out for retrieval on unseen classes.
pub fn split_by_class(ds: &LabeledDataset, train_fraction: f64, seed: u64) -> Result<LabeledDataset> {
    let c = ds.num_classes;
    if c < 2 {
        return Err(Error::contract("class split needs at least two classes"));
    }
    let n_train = (train_fraction * c as f64).round();
    if !(n_train >= 1.0 && n_train < c as f64) {
        return Err(Error::contract(format!(
            "train fraction {train_fraction} leaves one side of the split empty for C={c}"
        )));
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut rng_for(seed, streams::SPLIT));
    let side: BTreeMap<usize, Split> = order
        .iter()
        .enumerate()
        .map(|(i, class)| (*class, if (i as f64) < n_train { Split::Train } else { Split::Test }))
        .collect();
    let mut out = ds.clone();
    out.split = ds.labels.iter().map(|l| side[l]).collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ClusterSpec {
        ClusterSpec {
            num_classes: 4,
            clusters_per_class: 2,
            points_per_cluster: 5,
            dim: 3,
            sigma: 0.2,
            scale: 1.0,
            seed: 9,
        }
    }

    #[test]
    fn synthetic_shape_and_determinism() {
        let spec = small_spec();
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a.len(), 40);
        assert_eq!(a.num_classes, 4);
        assert!(a.labels.iter().all(|l| *l < 4));
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        let other = generate_synthetic(&ClusterSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.features, other.features);
    }

    #[test]
    fn vanishing_noise_collapses_clusters_to_means() {
        let spec = ClusterSpec {
            sigma: 1e-300,
            ..small_spec()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let ids = ds.cluster_ids.as_ref().unwrap();
        for i in 1..ds.len() {
            if ids[i] == ids[i - 1] {
                assert_eq!(ds.features[i], ds.features[i - 1]);
            }
        }
        assert!((crate::linalg::norm(&ds.features[0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(generate_synthetic(&ClusterSpec { sigma: 0.0, ..small_spec() }).is_err());
        assert!(generate_synthetic(&ClusterSpec { num_classes: 0, ..small_spec() }).is_err());
    }

    #[test]
    fn csv_reindexes_labels_by_first_appearance() {
        let text = "7,1.0,2.0\n7,3.0,4.0\n9,5.0,6.0\n";
        let ds = read_csv(text.as_bytes()).unwrap();
        assert_eq!(ds.labels, vec![0, 0, 1]);
        assert_eq!(ds.num_classes, 2);
        let ds = read_csv("label,a,b\n5,1,2\n3,1,2\n5,0,1\n".as_bytes()).unwrap();
        assert_eq!(ds.labels, vec![0, 1, 0]);
        assert_eq!(ds.features[2], vec![0.0, 1.0]);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let err = read_csv("1,2.0,3.0\n2,1.0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = read_csv("1,2.0,3.0\n2,x,1.0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = read_csv("1,2.0\n1.5,2.0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(read_csv("".as_bytes()).is_err());
        assert!(read_csv("label,a\n".as_bytes()).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn class_split_partitions_classes() {
        let ds = LabeledDataset::new(vec![vec![0.0]; 400], (0..400).map(|i| i % 200).collect()).unwrap();
        let split = split_by_class(&ds, 0.5, 3).unwrap();
        let train = split.classes_in(Split::Train);
        let test = split.classes_in(Split::Test);
        assert_eq!((train.len(), test.len()), (100, 100));
        assert!(train.iter().all(|c| !test.contains(c)));
        assert_eq!(split, split_by_class(&ds, 0.5, 3).unwrap());
        for (l, s) in split.labels.iter().zip(&split.split) {
            assert_eq!(*s == Split::Train, train.contains(l));
        }
    }

    #[test]
    fn class_split_rejects_empty_sides() {
        let ds = LabeledDataset::new(vec![vec![0.0]; 4], vec![0, 1, 2, 3]).unwrap();
        assert!(split_by_class(&ds, 0.0, 1).is_err());
        assert!(split_by_class(&ds, 1.0, 1).is_err());
        let one = LabeledDataset::new(vec![vec![0.0]; 2], vec![0, 0]).unwrap();
        assert!(split_by_class(&one, 0.5, 1).is_err());
    }

    #[test]
    fn subset_relabels_densely() {
        let ds = LabeledDataset::new(vec![vec![0.0]; 6], vec![0, 1, 2, 3, 4, 5]).unwrap();
        let split = split_by_class(&ds, 0.5, 0).unwrap();
        let test = split.subset(Split::Test).unwrap();
        assert_eq!(test.num_classes, 3);
        let mut labels = test.labels.clone();
        labels.sort_unstable();
        assert_eq!(labels, vec![0, 1, 2]);
    }
}

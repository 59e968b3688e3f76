//! Dataset ingestion, synthetic generation, normalization, and splits.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-feature min/max recorded by [`minmax_normalize`] so the transform can
/// be inverted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

/// A labeled feature matrix. Features are row-major `[n x dim]`; every
/// sample shares `feature_shape` (e.g. `[24]` for tabular rows, `[3,16,16]`
/// for images). Labels lie in `[0, class_count)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_shape: Vec<usize>,
    class_count: usize,
    normalization: Option<Vec<MinMax>>,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        feature_shape: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        let dim: usize = feature_shape.iter().product();
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "feature buffer of {} values does not match {} samples of shape {:?}",
                features.len(),
                labels.len(),
                feature_shape
            )));
        }
        if class_count < 2 {
            return Err(Error::InvalidArgument("class_count must be at least 2".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidLabel { label: bad, classes: class_count });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "dataset features".into() });
        }
        Ok(Self { features, labels, feature_shape, class_count, normalization: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn normalization(&self) -> Option<&[MinMax]> {
        self.normalization.as_deref()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn sample(&self, i: usize) -> Result<(Tensor, usize)> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange { index: i, len: self.len() });
        }
        Ok((
            Tensor::from_parts(self.feature_shape.clone(), self.feature_row(i).to_vec()),
            self.labels[i],
        ))
    }

    /// All rows as tensors, in dataset order.
    pub fn rows(&self) -> Vec<Tensor> {
        (0..self.len())
            .map(|i| Tensor::from_parts(self.feature_shape.clone(), self.feature_row(i).to_vec()))
            .collect()
    }

    /// New dataset holding the given rows of `self`, original order of
    /// `indices` preserved. Metadata (shape, classes, normalization record)
    /// carries over.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = self.dim();
        let mut features = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange { index: i, len: self.len() });
            }
            features.extend_from_slice(self.feature_row(i));
            labels.push(self.labels[i]);
        }
        Ok(Self {
            features,
            labels,
            feature_shape: self.feature_shape.clone(),
            class_count: self.class_count,
            normalization: self.normalization.clone(),
        })
    }
}

/// Which samples an unlearning request removes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum UnlearnSelection {
    /// Explicit dataset indices.
    ByIndex(Vec<usize>),
    /// The earliest `round(proportion * class_size)` samples of `class`, in
    /// dataset order. `proportion` must lie in (0, 1].
    ByClass { class: usize, proportion: f64 },
    /// Every sample of the listed classes.
    ByClasses(Vec<usize>),
}

impl UnlearnSelection {
    /// Resolve to a sorted, deduplicated index list. Errors when the result
    /// is empty or out of bounds.
    pub fn resolve(&self, ds: &Dataset) -> Result<Vec<usize>> {
        let mut indices = match self {
            UnlearnSelection::ByIndex(list) => {
                let mut v = list.clone();
                v.sort_unstable();
                v.dedup();
                for &i in &v {
                    if i >= ds.len() {
                        return Err(Error::IndexOutOfRange { index: i, len: ds.len() });
                    }
                }
                v
            }
            UnlearnSelection::ByClass { class, proportion } => {
                if !(*proportion > 0.0 && *proportion <= 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "unlearn proportion {proportion} outside (0, 1]"
                    )));
                }
                if *class >= ds.class_count() {
                    return Err(Error::InvalidLabel { label: *class, classes: ds.class_count() });
                }
                let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == *class).collect();
                let count = (proportion * members.len() as f64).round() as usize;
                members.into_iter().take(count).collect()
            }
            UnlearnSelection::ByClasses(classes) => {
                for &c in classes {
                    if c >= ds.class_count() {
                        return Err(Error::InvalidLabel { label: c, classes: ds.class_count() });
                    }
                }
                (0..ds.len()).filter(|&i| classes.contains(&ds.labels()[i])).collect()
            }
        };
        indices.sort_unstable();
        if indices.is_empty() {
            return Err(Error::EmptySelection);
        }
        Ok(indices)
    }

    /// Parse the CLI selector syntax: `index:3,5,9`, `class:0:1.0`,
    /// `classes:0,1,2`.
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidArgument(msg);
        if let Some(rest) = spec.strip_prefix("index:") {
            let idx = rest
                .split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|e| bad(format!("bad index `{s}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            Ok(UnlearnSelection::ByIndex(idx))
        } else if let Some(rest) = spec.strip_prefix("classes:") {
            let classes = rest
                .split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|e| bad(format!("bad class `{s}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            Ok(UnlearnSelection::ByClasses(classes))
        } else if let Some(rest) = spec.strip_prefix("class:") {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 2 {
                return Err(bad(format!("expected class:<id>:<proportion>, got `{spec}`")));
            }
            Ok(UnlearnSelection::ByClass {
                class: parts[0].parse().map_err(|e| bad(format!("bad class `{}`: {e}", parts[0])))?,
                proportion: parts[1]
                    .parse()
                    .map_err(|e| bad(format!("bad proportion `{}`: {e}", parts[1])))?,
            })
        } else {
            Err(bad(format!("unknown selection spec `{spec}`")))
        }
    }
}

/// Load a numeric CSV file. `label_column` is a zero-based column index; the
/// label field must hold a non-negative integer. Class count is inferred as
/// `max label + 1`.
pub fn load_csv(path: &Path, label_column: usize, has_header: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv { line: 0, msg: e.to_string() })?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        match width {
            None => {
                if record.len() <= label_column {
                    return Err(Error::Csv {
                        line,
                        msg: format!(
                            "label column {label_column} out of range for {} fields",
                            record.len()
                        ),
                    });
                }
                width = Some(record.len());
            }
            Some(w) if w != record.len() => {
                return Err(Error::Csv {
                    line,
                    msg: format!("expected {w} fields, found {}", record.len()),
                });
            }
            _ => {}
        }
        for (col, field) in record.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| Error::Csv {
                line,
                msg: format!("non-numeric field `{field}` in column {col}"),
            })?;
            if col == label_column {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::Csv {
                        line,
                        msg: format!("label `{field}` is not a non-negative integer"),
                    });
                }
                labels.push(value as usize);
            } else {
                features.push(value);
            }
        }
    }
    let dim = width.ok_or(Error::EmptyDataset)? - 1;
    let classes = labels.iter().max().map(|&m| (m + 1).max(2)).unwrap_or(2);
    Dataset::new(features, labels, vec![dim], classes)
}

/// Per-feature min-max scaling into [0,1]. Zero-range features map to 0.
/// The per-feature min/max record is stored on the result so the transform
/// can be inverted with [`denormalize`].
pub fn minmax_normalize(ds: &Dataset) -> Dataset {
    let d = ds.dim();
    let mut ranges = vec![MinMax { min: f64::INFINITY, max: f64::NEG_INFINITY }; d];
    for i in 0..ds.len() {
        for (r, &v) in ranges.iter_mut().zip(ds.feature_row(i)) {
            r.min = r.min.min(v);
            r.max = r.max.max(v);
        }
    }
    let mut features = Vec::with_capacity(ds.features.len());
    for i in 0..ds.len() {
        for (r, &v) in ranges.iter_mut().zip(ds.feature_row(i)) {
            let span = r.max - r.min;
            features.push(if span == 0.0 { 0.0 } else { (v - r.min) / span });
        }
    }
    Dataset {
        features,
        labels: ds.labels.clone(),
        feature_shape: ds.feature_shape.clone(),
        class_count: ds.class_count,
        normalization: Some(ranges),
    }
}

/// Invert [`minmax_normalize`] using the stored per-feature record. Features
/// whose original range was zero come back at their recorded minimum.
pub fn denormalize(ds: &Dataset) -> Result<Dataset> {
    let ranges = ds
        .normalization
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("dataset carries no normalization record".into()))?;
    let mut features = Vec::with_capacity(ds.features.len());
    for i in 0..ds.len() {
        for (r, &v) in ranges.iter().zip(ds.feature_row(i)) {
            features.push(r.min + v * (r.max - r.min));
        }
    }
    Ok(Dataset {
        features,
        labels: ds.labels.clone(),
        feature_shape: ds.feature_shape.clone(),
        class_count: ds.class_count,
        normalization: None,
    })
}

/// Disjoint, exhaustive 80/20 split by a seeded uniform shuffle; the private
/// side gets `floor(0.2 n)` samples. Returns `(pretrain, private)`.
pub fn split_pretrain_private(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    if ds.len() < 5 {
        return Err(Error::InvalidArgument(format!(
            "need at least 5 samples to split, have {}",
            ds.len()
        )));
    }
    let mut indices: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let private_n = ds.len() / 5;
    let (private_idx, pretrain_idx) = indices.split_at(private_n);
    let mut pretrain_idx = pretrain_idx.to_vec();
    let mut private_idx = private_idx.to_vec();
    pretrain_idx.sort_unstable();
    private_idx.sort_unstable();
    Ok((ds.subset(&pretrain_idx)?, ds.subset(&private_idx)?))
}

/// Split a dataset into `(kept, removed)` per an unlearning selection.
/// `kept` preserves the original order of the complement.
pub fn select_unlearn(ds: &Dataset, selection: &UnlearnSelection) -> Result<(Dataset, Dataset)> {
    let removed_idx = selection.resolve(ds)?;
    if removed_idx.len() == ds.len() {
        return Err(Error::EmptyRemainder);
    }
    let mut is_removed = vec![false; ds.len()];
    for &i in &removed_idx {
        is_removed[i] = true;
    }
    let kept_idx: Vec<usize> = (0..ds.len()).filter(|&i| !is_removed[i]).collect();
    Ok((ds.subset(&kept_idx)?, ds.subset(&removed_idx)?))
}

/// Kind of synthetic dataset to generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SynthKind {
    /// Class-conditioned Gaussian blobs clipped to [0,1]^dims.
    TabularBlobs { dims: usize },
    /// Class-specific sinusoidal stripe patterns plus noise, values in [0,1].
    PatternImages { shape: [usize; 3] },
}

/// Generate a class-balanced, seeded synthetic dataset. Labels are assigned
/// round-robin and the sample order is then shuffled, so class counts are
/// balanced within one.
pub fn synth_dataset(kind: &SynthKind, n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(Error::InvalidArgument(format!(
            "need n >= classes >= 2, got n={n}, classes={classes}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let labels: Vec<usize> = order.iter().map(|&i| i % classes).collect();
    match kind {
        SynthKind::TabularBlobs { dims } => synth_blobs(&labels, classes, *dims, &mut rng),
        SynthKind::PatternImages { shape } => synth_patterns(&labels, classes, *shape, &mut rng),
    }
}

fn synth_blobs(labels: &[usize], classes: usize, dims: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    if dims == 0 {
        return Err(Error::InvalidArgument("blob dims must be positive".into()));
    }
    let noise_sigma = 0.08;
    // Rejection-sample class centers with a minimum pairwise distance; the
    // requirement halves whenever the box gets too crowded to satisfy it.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut min_dist: f64 = 0.48;
    let mut failures = 0;
    while centers.len() < classes {
        let cand: Vec<f64> = (0..dims).map(|_| rng.random_range(0.2..0.8)).collect();
        let ok = centers.iter().all(|c| {
            let d2: f64 = c.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum();
            d2.sqrt() >= min_dist
        });
        if ok {
            centers.push(cand);
        } else {
            failures += 1;
            if failures >= 500 {
                min_dist /= 2.0;
                failures = 0;
            }
        }
    }
    let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
    let mut features = Vec::with_capacity(labels.len() * dims);
    for &label in labels {
        for d in 0..dims {
            let v: f64 = centers[label][d] + normal.sample(rng);
            features.push(v.clamp(0.0, 1.0));
        }
    }
    Dataset::new(features, labels.to_vec(), vec![dims], classes)
}

fn synth_patterns(
    labels: &[usize],
    classes: usize,
    shape: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let [ch, h, w] = shape;
    if ch == 0 || h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!("bad image shape {shape:?}")));
    }
    let noise_sigma = 0.06;
    let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
    let mut features = Vec::with_capacity(labels.len() * ch * h * w);
    for &label in labels {
        // Each class is a stripe pattern with its own frequency, orientation
        // and phase; channels are phase-shifted copies.
        let freq = 1.0 + (label / 2) as f64;
        let horizontal = label % 2 == 0;
        let phase = 0.9 * label as f64;
        for c in 0..ch {
            for y in 0..h {
                for x in 0..w {
                    let t = if horizontal { y as f64 / h as f64 } else { x as f64 / w as f64 };
                    let base = 0.5
                        + 0.42
                            * (2.0 * std::f64::consts::PI * freq * t + phase + 1.1 * c as f64).sin();
                    let v: f64 = base + normal.sample(rng);
                    features.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Dataset::new(features, labels.to_vec(), vec![ch, h, w], classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tiny_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn load_csv_basic() {
        let f = tiny_csv("0.5,1.5,0\n0.25,2.0,1\n0.75,3.0,1\n");
        let ds = load_csv(f.path(), 2, false).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.labels(), &[0, 1, 1]);
        assert_eq!(ds.feature_row(1), &[0.25, 2.0]);
    }

    #[test]
    fn load_csv_skips_header_when_flagged() {
        let f = tiny_csv("a,b,label\n0.5,1.5,0\n0.25,2.0,1\n");
        let ds = load_csv(f.path(), 2, true).unwrap();
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn load_csv_reports_line_numbers() {
        let f = tiny_csv("0.5,1.5,0\n0.25,zebra,1\n");
        match load_csv(f.path(), 2, false) {
            Err(Error::Csv { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("zebra"));
            }
            other => panic!("expected csv error, got {other:?}"),
        }
    }

    #[test]
    fn load_csv_credit_shaped_file() {
        // 25 columns: 24 features plus a binary label in the last column.
        let mut rows = String::new();
        for i in 0..6 {
            let mut fields: Vec<String> = (0..24).map(|j| format!("{}", (i * 24 + j) as f64 * 0.01)).collect();
            fields.push(format!("{}", i % 2));
            rows.push_str(&fields.join(","));
            rows.push('\n');
        }
        let f = tiny_csv(&rows);
        let ds = load_csv(f.path(), 24, false).unwrap();
        assert_eq!(ds.dim(), 24);
        assert_eq!(ds.class_count(), 2);
    }

    #[test]
    fn minmax_normalize_maps_extremes_and_zero_range() {
        let ds = Dataset::new(vec![2.0, 7.0, 4.0, 7.0], vec![0, 1], vec![2], 2).unwrap();
        let norm = minmax_normalize(&ds);
        assert_eq!(norm.feature_row(0), &[0.0, 0.0]);
        assert_eq!(norm.feature_row(1), &[1.0, 0.0]);
    }

    #[test]
    fn minmax_normalize_is_idempotent() {
        let ds = Dataset::new(vec![2.0, 1.0, 4.0, 3.0, 6.0, 3.0], vec![0, 1, 0], vec![2], 2).unwrap();
        let once = minmax_normalize(&ds);
        let twice = minmax_normalize(&once);
        assert_eq!(once.features, twice.features);
    }

    #[test]
    fn normalize_round_trip() {
        let ds = Dataset::new(vec![2.0, 1.0, 4.0, 3.5, 6.0, 3.0], vec![0, 1, 0], vec![2], 2).unwrap();
        let back = denormalize(&minmax_normalize(&ds)).unwrap();
        for (a, b) in back.features.iter().zip(&ds.features) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn split_80_20_counts_and_partition() {
        let ds = Dataset::new((0..20).map(|v| v as f64).collect(), vec![0, 1].repeat(5), vec![2], 2).unwrap();
        let (d0, du) = split_pretrain_private(&ds, 7).unwrap();
        assert_eq!(d0.len(), 8);
        assert_eq!(du.len(), 2);

        // Union of split features equals the original multiset of rows.
        let mut rows: Vec<Vec<f64>> = (0..d0.len()).map(|i| d0.feature_row(i).to_vec()).collect();
        rows.extend((0..du.len()).map(|i| du.feature_row(i).to_vec()));
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut orig: Vec<Vec<f64>> = (0..ds.len()).map(|i| ds.feature_row(i).to_vec()).collect();
        orig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, orig);
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let ds = synth_dataset(&SynthKind::TabularBlobs { dims: 4 }, 50, 5, 3).unwrap();
        let (a0, a1) = split_pretrain_private(&ds, 42).unwrap();
        let (b0, b1) = split_pretrain_private(&ds, 42).unwrap();
        assert_eq!(a0, b0);
        assert_eq!(a1, b1);
        let (c0, _) = split_pretrain_private(&ds, 43).unwrap();
        assert_ne!(a0, c0);
    }

    #[test]
    fn select_by_class_full_and_partial() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let feats: Vec<f64> = (0..60).map(|v| v as f64).collect();
        let ds = Dataset::new(feats, labels, vec![1], 3).unwrap();

        // proportion 1.0 removes every class-0 sample (20 of them)
        let (kept, removed) =
            select_unlearn(&ds, &UnlearnSelection::ByClass { class: 0, proportion: 1.0 }).unwrap();
        assert_eq!(removed.len(), 20);
        assert!(removed.labels().iter().all(|&l| l == 0));
        assert_eq!(kept.len(), 40);

        // proportion 0.1 on a 50-sample class removes 5
        let labels: Vec<usize> = (0..150).map(|i| i % 3).collect();
        let feats: Vec<f64> = (0..150).map(|v| v as f64).collect();
        let ds = Dataset::new(feats, labels, vec![1], 3).unwrap();
        let (_, removed) =
            select_unlearn(&ds, &UnlearnSelection::ByClass { class: 0, proportion: 0.1 }).unwrap();
        assert_eq!(removed.len(), 5);
    }

    #[test]
    fn select_by_index_single() {
        let ds = synth_dataset(&SynthKind::TabularBlobs { dims: 3 }, 10, 2, 1).unwrap();
        let (kept, removed) = select_unlearn(&ds, &UnlearnSelection::ByIndex(vec![4])).unwrap();
        assert_eq!(removed.len(), 1);
        assert_eq!(kept.len(), 9);
        assert_eq!(removed.feature_row(0), ds.feature_row(4));
    }

    #[test]
    fn select_partition_properties() {
        let ds = synth_dataset(&SynthKind::TabularBlobs { dims: 3 }, 30, 3, 5).unwrap();
        let (kept, removed) =
            select_unlearn(&ds, &UnlearnSelection::ByClasses(vec![0, 2])).unwrap();
        assert_eq!(kept.len() + removed.len(), ds.len());
        assert!(kept.labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn select_errors() {
        let ds = synth_dataset(&SynthKind::TabularBlobs { dims: 3 }, 10, 2, 1).unwrap();
        assert!(matches!(
            select_unlearn(&ds, &UnlearnSelection::ByIndex(vec![99])),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            select_unlearn(&ds, &UnlearnSelection::ByClass { class: 0, proportion: 0.01 }),
            Err(Error::EmptySelection)
        ));
        assert!(matches!(
            select_unlearn(&ds, &UnlearnSelection::ByClasses(vec![0, 1])),
            Err(Error::EmptyRemainder)
        ));
    }

    #[test]
    fn selection_parse_round_trips() {
        assert_eq!(
            UnlearnSelection::parse("index:17").unwrap(),
            UnlearnSelection::ByIndex(vec![17])
        );
        assert_eq!(
            UnlearnSelection::parse("class:0:1.0").unwrap(),
            UnlearnSelection::ByClass { class: 0, proportion: 1.0 }
        );
        assert_eq!(
            UnlearnSelection::parse("classes:0,1,2").unwrap(),
            UnlearnSelection::ByClasses(vec![0, 1, 2])
        );
        assert!(UnlearnSelection::parse("flavor:mint").is_err());
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let kind = SynthKind::TabularBlobs { dims: 6 };
        let a = synth_dataset(&kind, 103, 4, 9).unwrap();
        let b = synth_dataset(&kind, 103, 4, 9).unwrap();
        assert_eq!(a, b);

        let mut counts = vec![0usize; 4];
        for &l in a.labels() {
            counts[l] += 1;
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(max - min <= 1, "class counts {counts:?}");
    }

    #[test]
    fn synth_images_in_unit_box() {
        let ds = synth_dataset(&SynthKind::PatternImages { shape: [3, 8, 8] }, 20, 4, 2).unwrap();
        assert_eq!(ds.feature_shape(), &[3, 8, 8]);
        assert!(ds.features.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

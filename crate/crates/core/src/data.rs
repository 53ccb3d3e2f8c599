//! Dataset construction: alignment across parties, vertical feature splits,
//! class balancing, train/test splits, synthetic generators and CSV ingestion.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Samples × features over the shared sample space, with the per-party
/// column partition and the train/test assignment of every row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub ids: Vec<String>,
    pub feature_partition: Vec<Vec<usize>>,
    pub split: Vec<Split>,
    /// `(rows, cols)` when the features are flattened row-major images.
    pub image_shape: Option<(usize, usize)>,
}

impl AlignedDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::shape("AlignedDataset labels", features.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        let n = features.rows();
        let cols = features.cols();
        Ok(Self {
            features,
            labels,
            classes,
            ids: (0..n).map(|i| i.to_string()).collect(),
            feature_partition: vec![(0..cols).collect()],
            split: vec![Split::Train; n],
            image_shape: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows_in(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.split[r] == which).collect()
    }

    pub fn train_rows(&self) -> Vec<usize> {
        self.rows_in(Split::Train)
    }

    pub fn test_rows(&self) -> Vec<usize> {
        self.rows_in(Split::Test)
    }

    pub fn class_counts(&self, rows: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &r in rows {
            counts[self.labels[r]] += 1;
        }
        counts
    }

    /// Replaces the feature partition after checking it is disjoint and in range.
    pub fn with_partition(mut self, partition: Vec<Vec<usize>>) -> Result<Self> {
        check_partition(&partition, self.features.cols())?;
        self.feature_partition = partition;
        Ok(self)
    }
}

pub fn check_partition(partition: &[Vec<usize>], total: usize) -> Result<()> {
    let mut seen = HashSet::new();
    for (i, cols) in partition.iter().enumerate() {
        if cols.is_empty() {
            return Err(Error::invalid(format!("party {i} receives no columns")));
        }
        for &c in cols {
            if c >= total {
                return Err(Error::invalid(format!("column {c} out of range for {total} features")));
            }
            if !seen.insert(c) {
                return Err(Error::invalid(format!("column {c} assigned to more than one party")));
            }
        }
    }
    Ok(())
}

/// One party's view before alignment: features keyed by sample id.
#[derive(Clone, Debug)]
pub struct KeyedSource {
    pub ids: Vec<String>,
    pub features: Matrix,
}

#[derive(Clone, Debug)]
pub struct KeyedLabels {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

fn unique_index(ids: &[String], what: &str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if map.insert(id.clone(), i).is_some() {
            return Err(Error::Data(format!("duplicate id {id:?} in {what}")));
        }
    }
    Ok(map)
}

/// Restricts every source to the intersection of the sample ids and stacks
/// their columns; each source becomes one party's contiguous column block.
/// Rows follow the order of the first source.
pub fn align(sources: &[KeyedSource], labels: &KeyedLabels) -> Result<AlignedDataset> {
    if sources.is_empty() {
        return Err(Error::invalid("no sources to align"));
    }
    let mut indexes = Vec::with_capacity(sources.len());
    for (i, s) in sources.iter().enumerate() {
        if s.ids.len() != s.features.rows() {
            return Err(Error::shape("align source ids", s.features.rows(), s.ids.len()));
        }
        indexes.push(unique_index(&s.ids, &format!("source {i}"))?);
    }
    let label_index = unique_index(&labels.ids, "labels")?;

    let common: Vec<&String> = sources[0]
        .ids
        .iter()
        .filter(|id| indexes[1..].iter().all(|m| m.contains_key(*id)) && label_index.contains_key(*id))
        .collect();
    if common.is_empty() {
        return Err(Error::Data("sources share no sample ids".into()));
    }

    let blocks: Vec<Matrix> = sources
        .iter()
        .zip(&indexes)
        .map(|(s, idx)| {
            let rows: Vec<usize> = common.iter().map(|id| idx[*id]).collect();
            s.features.select_rows(&rows)
        })
        .collect();
    let refs: Vec<&Matrix> = blocks.iter().collect();
    let features = Matrix::hconcat(&refs)?;
    let y: Vec<usize> = common.iter().map(|id| labels.labels[label_index[*id]]).collect();

    let mut ds = AlignedDataset::new(features, y, labels.classes)?;
    ds.ids = common.into_iter().cloned().collect();
    let mut start = 0;
    ds.feature_partition = blocks
        .iter()
        .map(|b| {
            let cols = (start..start + b.cols()).collect();
            start += b.cols();
            cols
        })
        .collect();
    Ok(ds)
}

fn block_sizes(total: usize, ratios: &[f64], round: impl Fn(f64) -> f64) -> Result<Vec<usize>> {
    if ratios.is_empty() {
        return Err(Error::invalid("no feature ratios"));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || ratios.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::invalid(format!("feature ratios must be positive and sum to 1, got {ratios:?}")));
    }
    let mut sizes = Vec::with_capacity(ratios.len());
    let mut used = 0usize;
    for &r in &ratios[..ratios.len() - 1] {
        let s = round(r * total as f64) as usize;
        sizes.push(s);
        used += s;
    }
    if used >= total {
        return Err(Error::invalid("the last party receives no columns"));
    }
    sizes.push(total - used);
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::invalid(format!("party {i} receives no columns")));
    }
    Ok(sizes)
}

/// Contiguous column blocks sized by rounded ratios; the last party takes the
/// remainder (10 features over three equal parties gives 3, 3, 4).
pub fn vertical_split(total_features: usize, ratios: &[f64]) -> Result<Vec<Vec<usize>>> {
    let sizes = block_sizes(total_features, ratios, f64::round)?;
    let mut start = 0;
    Ok(sizes
        .into_iter()
        .map(|s| {
            let cols = (start..start + s).collect();
            start += s;
            cols
        })
        .collect())
}

/// Splits a row-major image into pixel-column blocks from the left: party 0
/// owns image columns `[0, ⌈width·r₀⌉)`, and so on; the last party takes the rest.
pub fn image_column_split(height: usize, width: usize, ratios: &[f64]) -> Result<Vec<Vec<usize>>> {
    let sizes = block_sizes(width, ratios, |v| (v - 1e-9).ceil())?;
    let mut start = 0;
    Ok(sizes
        .into_iter()
        .map(|s| {
            let cols: Vec<usize> = (0..height)
                .flat_map(|r| (start..start + s).map(move |c| r * width + c))
                .collect();
            start += s;
            cols
        })
        .collect())
}

/// Duplicates training rows (sampling with replacement) until every class
/// has as many training rows as the largest one. Test rows are untouched.
pub fn oversample_balance(ds: &AlignedDataset, seed: u64) -> Result<AlignedDataset> {
    let train = ds.train_rows();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for &r in &train {
        by_class[ds.labels[r]].push(r);
    }
    if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
        return Err(Error::Data(format!("class {c} has no training rows")));
    }
    let target = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut rng = seeded(seed);
    let mut extra = Vec::new();
    for rows in &by_class {
        for _ in rows.len()..target {
            extra.push(rows[rng.random_range(0..rows.len())]);
        }
    }
    if extra.is_empty() {
        return Ok(ds.clone());
    }
    let mut out = ds.clone();
    let dup = ds.features.select_rows(&extra);
    out.features = Matrix::vconcat(&[&ds.features, &dup])?;
    for (k, &r) in extra.iter().enumerate() {
        out.labels.push(ds.labels[r]);
        out.ids.push(format!("{}#dup{k}", ds.ids[r]));
        out.split.push(Split::Train);
    }
    Ok(out)
}

/// Seeded shuffle, then the first `round(ratio·n)` rows become training rows.
pub fn train_test_split(ds: &AlignedDataset, ratio: f64, seed: u64) -> Result<AlignedDataset> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let n = ds.len();
    if n < 2 {
        return Err(Error::Data(format!("cannot split {n} rows")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut out = ds.clone();
    for (k, &r) in order.iter().enumerate() {
        out.split[r] = if k < n_train { Split::Train } else { Split::Test };
    }
    Ok(out)
}

/// Gaussian clusters with unit covariance; cluster means are drawn uniformly
/// from a box and redrawn until all pairs are at least `separation` apart.
pub fn synth_blobs(
    classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<AlignedDataset> {
    if classes < 2 || n_per_class == 0 || dim < 2 || !(separation > 0.0) {
        return Err(Error::invalid(format!(
            "invalid blob parameters: classes {classes}, n_per_class {n_per_class}, dim {dim}, separation {separation}"
        )));
    }
    let mut rng = seeded(seed);
    let mut half_width = separation;
    let means = 'outer: loop {
        for _ in 0..1000 {
            let means: Vec<Vec<f64>> = (0..classes)
                .map(|_| (0..dim).map(|_| rng.random_range(-half_width..half_width)).collect())
                .collect();
            let ok = (0..classes).all(|i| {
                (i + 1..classes).all(|j| {
                    let d2: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    d2.sqrt() >= separation
                })
            });
            if ok {
                break 'outer means;
            }
        }
        half_width *= 1.25;
    };

    let mut data = Vec::with_capacity(classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
            labels.push(c);
        }
    }
    let features = Matrix::new(classes * n_per_class, dim, data)?;
    AlignedDataset::new(features, labels, classes)
}

/// Stroke primitives used to compose class glyphs.
fn stroke(kind: usize, side: usize, r: usize, c: usize) -> bool {
    let m = side - 1;
    let mid = side / 2;
    match kind {
        0 => r == c || r + 1 == c,             // main diagonal
        1 => r + c == m || r + c + 1 == m,     // anti-diagonal
        2 => r == mid || r + 1 == mid,         // horizontal bar
        3 => c == mid || c + 1 == mid,         // vertical bar
        4 => r <= 1,                           // top edge
        5 => r >= m - 1,                       // bottom edge
        6 => c <= 1,                           // left edge
        7 => c >= m - 1,                       // right edge
        8 => {
            // ring
            let (dr, dc) = (r as f64 - m as f64 / 2.0, c as f64 - m as f64 / 2.0);
            let rad = (dr * dr + dc * dc).sqrt();
            (rad - side as f64 / 3.2).abs() < 0.8
        }
        _ => false,
    }
}

const STROKE_KINDS: usize = 9;

/// Binary template of one class: the union of the strokes selected by the
/// bits of `class + 1`.
pub fn glyph_template(class: usize, side: usize) -> Vec<f64> {
    let mask = class + 1;
    (0..side * side)
        .map(|i| {
            let (r, c) = (i / side, i % side);
            let on = (0..STROKE_KINDS).any(|k| mask & (1 << k) != 0 && stroke(k, side, r, c));
            if on {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Class glyphs plus Gaussian pixel noise, clamped to `[0, 1]` and flattened
/// row-major.
pub fn synth_images(
    classes: usize,
    n_per_class: usize,
    side: usize,
    noise: f64,
    seed: u64,
) -> Result<AlignedDataset> {
    if side < 8 {
        return Err(Error::invalid(format!("image side must be at least 8, got {side}")));
    }
    if classes < 2 || classes >= (1 << STROKE_KINDS) || n_per_class == 0 || noise < 0.0 {
        return Err(Error::invalid(format!(
            "invalid image parameters: classes {classes}, n_per_class {n_per_class}, noise {noise}"
        )));
    }
    let mut rng = seeded(seed);
    let mut data = Vec::with_capacity(classes * n_per_class * side * side);
    let mut labels = Vec::new();
    for c in 0..classes {
        let template = glyph_template(c, side);
        for _ in 0..n_per_class {
            data.extend(template.iter().map(|&t| {
                let n: f64 = rng.sample(StandardNormal);
                (t + noise * n).clamp(0.0, 1.0)
            }));
            labels.push(c);
        }
    }
    let features = Matrix::new(classes * n_per_class, side * side, data)?;
    let mut ds = AlignedDataset::new(features, labels, classes)?;
    ds.image_shape = Some((side, side));
    Ok(ds)
}

#[derive(Clone, Debug)]
pub struct CsvOptions {
    pub label_column: String,
    pub drop_columns: Vec<String>,
    pub split_ratio: f64,
    pub seed: u64,
}

impl CsvOptions {
    pub fn new(label_column: impl Into<String>) -> Self {
        Self {
            label_column: label_column.into(),
            drop_columns: Vec::new(),
            split_ratio: 0.7,
            seed: 0,
        }
    }
}

/// Reads a headed CSV. An `id` column, when present, supplies row ids. Labels
/// are mapped to class indices in sorted order (numerically when all labels
/// parse as numbers). The rows are split into train/test and every feature
/// column is standardized with train-row statistics.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<AlignedDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let label_idx = headers
        .iter()
        .position(|h| *h == opts.label_column)
        .ok_or_else(|| Error::Data(format!("label column {:?} not found", opts.label_column)))?;
    let id_idx = headers.iter().position(|h| h == "id");
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|&i| i != label_idx && Some(i) != id_idx && !opts.drop_columns.contains(&headers[i]))
        .collect();

    let mut data = Vec::new();
    let mut raw_labels = Vec::new();
    let mut ids = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        for &i in &feature_idx {
            let cell = rec.get(i).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "non-numeric value {cell:?} in column {:?}, data row {}",
                    headers[i],
                    line + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite value in column {:?}", headers[i])));
            }
            data.push(v);
        }
        let label = rec.get(label_idx).unwrap_or("").to_string();
        if label.is_empty() {
            return Err(Error::Data(format!("missing label on data row {}", line + 1)));
        }
        raw_labels.push(label);
        ids.push(match id_idx {
            Some(i) => rec.get(i).unwrap_or("").to_string(),
            None => line.to_string(),
        });
    }
    if raw_labels.is_empty() {
        return Err(Error::Data("csv has no data rows".into()));
    }

    let numeric: Option<Vec<f64>> = raw_labels.iter().map(|l| l.parse::<f64>().ok()).collect();
    let class_of: BTreeMap<String, usize> = match numeric {
        Some(values) => {
            let mut pairs: Vec<(f64, &String)> = values.into_iter().zip(&raw_labels).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut map = BTreeMap::new();
            for (_, l) in pairs {
                let next = map.len();
                map.entry(l.clone()).or_insert(next);
            }
            map
        }
        None => {
            let distinct: std::collections::BTreeSet<&String> = raw_labels.iter().collect();
            distinct.into_iter().enumerate().map(|(i, l)| (l.clone(), i)).collect()
        }
    };
    let labels: Vec<usize> = raw_labels.iter().map(|l| class_of[l]).collect();
    let classes = class_of.len().max(2);

    let features = Matrix::new(labels.len(), feature_idx.len(), data)?;
    let mut ds = AlignedDataset::new(features, labels, classes)?;
    unique_index(&ids, "csv ids")?;
    ds.ids = ids;
    let mut ds = if ds.len() >= 2 {
        train_test_split(&ds, opts.split_ratio, opts.seed)?
    } else {
        ds
    };
    standardize_with_train_stats(&mut ds);
    Ok(ds)
}

/// Standardizes each feature column to mean 0, variance 1 over train rows.
/// Constant columns are only centered.
pub fn standardize_with_train_stats(ds: &mut AlignedDataset) {
    let train = ds.train_rows();
    if train.is_empty() {
        return;
    }
    let n = train.len() as f64;
    for c in 0..ds.features.cols() {
        let mean = train.iter().map(|&r| ds.features.get(r, c)).sum::<f64>() / n;
        let var = train
            .iter()
            .map(|&r| (ds.features.get(r, c) - mean).powi(2))
            .sum::<f64>()
            / n;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        for r in 0..ds.features.rows() {
            let v = ds.features.get(r, c);
            ds.features.set(r, c, (v - mean) * scale);
        }
    }
}

//! Dataset containers and loaders (IDX image files, CSV tables) plus
//! synthetic tabular generators.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use byteorder::{BigEndian, ReadBytesExt};
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use std::io::{Cursor, Read};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Row-major feature matrix with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    /// Shape of one sample, e.g. `[1, 28, 28]` for images or `[d]`.
    pub sample_shape: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, sample_shape: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        if d == 0 || features.len() != labels.len() * d {
            return Err(Error::Length(format!(
                "{} features for {} samples of shape {sample_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Range(format!("label {bad} outside 0..{classes}")));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Dataset {
            features,
            labels,
            sample_shape,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.features[i * d..][..d]
    }

    /// Stacks the selected samples into a `[batch, ...sample_shape]` tensor.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.sample_shape);
        let mut x = Vec::with_capacity(idx.len() * self.dim());
        for &i in idx {
            x.extend_from_slice(self.row(i));
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::real(&shape, x).expect("sizes agree"), labels)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.dim());
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            sample_shape: self.sample_shape.clone(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Keeps only the listed classes, relabelled `0..classes.len()`.
    pub fn select_classes(&self, classes: &[usize]) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        let mut out = self.subset(&idx);
        for y in &mut out.labels {
            *y = classes.iter().position(|c| c == y).expect("filtered");
        }
        out.classes = classes.len();
        out
    }

    /// Flattens each sample to a vector.
    pub fn flattened(mut self) -> Dataset {
        self.sample_shape = vec![self.dim()];
        self
    }

    /// Keeps `k` features picked by a uniform stride over the flattened sample.
    pub fn subsample_features(&self, k: usize) -> Result<Dataset> {
        let d = self.dim();
        if k == 0 || k > d {
            return Err(Error::Config(format!("cannot sub-sample {k} of {d} features")));
        }
        let cols: Vec<usize> = (0..k).map(|i| i * d / k).collect();
        let mut features = Vec::with_capacity(self.len() * k);
        for i in 0..self.len() {
            let r = self.row(i);
            features.extend(cols.iter().map(|&c| r[c]));
        }
        Ok(Dataset {
            features,
            labels: self.labels.clone(),
            sample_shape: vec![k],
            classes: self.classes,
            split: self.split,
        })
    }

    /// Random split into `(train, test)` with `test_fraction` of the rows held out.
    pub fn split(&self, test_fraction: f64, rng: &mut impl Rng) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        let mut test = self.subset(&idx[..n_test]);
        let mut train = self.subset(&idx[n_test..]);
        test.split = Split::Test;
        train.split = Split::Train;
        (train, test)
    }
}

/// Per-column affine standardization fitted on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const VARIANCE_FLOOR: f64 = 1e-12;

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Self {
        let d = ds.dim();
        let n = ds.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for i in 0..ds.len() {
            for (m, x) in mean.iter_mut().zip(ds.row(i)) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; d];
        for i in 0..ds.len() {
            for ((v, x), m) in var.iter_mut().zip(ds.row(i)).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let std = var.iter().map(|v| v.max(VARIANCE_FLOOR).sqrt()).collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let d = ds.dim();
        for row in ds.features.chunks_mut(d) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = if *s <= VARIANCE_FLOOR.sqrt() { 0.0 } else { (*x - m) / s };
            }
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn idx_header(cur: &mut Cursor<&[u8]>, magic: u32, dims: usize, what: &str) -> Result<Vec<usize>> {
    let m = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Length(format!("{what}: file shorter than its header")))?;
    if m != magic {
        return Err(Error::Format(format!("{what}: bad magic 0x{m:08x}, expected 0x{magic:08x}")));
    }
    (0..dims)
        .map(|_| {
            cur.read_u32::<BigEndian>()
                .map(|v| v as usize)
                .map_err(|_| Error::Length(format!("{what}: file shorter than its header")))
        })
        .collect()
}

/// Parses IDX image bytes into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut cur = Cursor::new(bytes);
    let dims = idx_header(&mut cur, IDX_IMAGES, 3, "images")?;
    let (n, r, c) = (dims[0], dims[1], dims[2]);
    let start = cur.position() as usize;
    let need = n * r * c;
    if bytes.len() < start + need {
        return Err(Error::Length(format!("images: expected {need} pixel bytes, found {}", bytes.len() - start)));
    }
    Ok((n, r, c, bytes[start..start + need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = Cursor::new(bytes);
    let n = idx_header(&mut cur, IDX_LABELS, 1, "labels")?[0];
    let start = cur.position() as usize;
    if bytes.len() < start + n {
        return Err(Error::Length(format!("labels: expected {n} bytes, found {}", bytes.len() - start)));
    }
    Ok(bytes[start..start + n].to_vec())
}

/// Loads an IDX image/label pair (optionally gzip-compressed) with pixels
/// scaled to `[0, 1]` and samples shaped `[1, rows, cols]`.
pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (n, r, c, px) = parse_idx_images(&read_maybe_gz(images.as_ref())?)?;
    let lab = parse_idx_labels(&read_maybe_gz(labels.as_ref())?)?;
    if lab.len() != n {
        return Err(Error::Length(format!("{n} images but {} labels", lab.len())));
    }
    let labels: Vec<usize> = lab.iter().map(|&y| y as usize).collect();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1).max(10);
    let features = px.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(features, labels, vec![1, r, c], classes, Split::Train)
}

/// Loads the bundled or user-supplied MNIST directory: `train-*` and `t10k-*`
/// files, gzip-compressed or not.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let pick = |stem: &str| {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() { gz } else { dir.join(stem) }
    };
    let train = load_mnist_idx(pick("train-images-idx3-ubyte"), pick("train-labels-idx1-ubyte"))?;
    let mut test = load_mnist_idx(pick("t10k-images-idx3-ubyte"), pick("t10k-labels-idx1-ubyte"))?;
    test.split = Split::Test;
    Ok((train, test))
}

/// A parsed CSV table and the number of incomplete rows skipped.
#[derive(Clone, Debug)]
pub struct CsvDataset {
    pub dataset: Dataset,
    pub feature_names: Vec<String>,
    pub dropped: usize,
}

/// Reads a headed numeric CSV; `label_column` holds non-negative integer
/// classes and every other column becomes a feature. Rows with empty or
/// missing cells are dropped and counted. Features are returned raw; fit a
/// [`Standardizer`] on the training split.
pub fn load_csv_dataset(path: impl AsRef<Path>, label_column: &str) -> Result<CsvDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| Error::Data(e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Config(format!("label column `{label_column}` not in header")))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dropped = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        let row = r + 1;
        if rec.len() < header.len() || rec.iter().take(header.len()).any(|c| c.is_empty()) {
            dropped += 1;
            continue;
        }
        let mut vals = Vec::with_capacity(header.len());
        for (c, cell) in rec.iter().take(header.len()).enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                msg: format!("`{cell}` is not a number"),
            })?;
            vals.push(v);
        }
        let y = vals.remove(label_idx);
        if y < 0.0 || y.fract() != 0.0 {
            return Err(Error::Parse {
                row,
                column: label_idx + 1,
                msg: format!("label `{y}` is not a class index"),
            });
        }
        labels.push(y as usize);
        features.extend(vals);
    }
    if dropped > 0 {
        log::info!("dropped {dropped} incomplete rows");
    }
    let d = header.len() - 1;
    let classes = labels.iter().copied().max().map_or(1, |m| m + 1).max(2);
    let mut feature_names = header;
    feature_names.remove(label_idx);
    Ok(CsvDataset {
        dataset: Dataset::new(features, labels, vec![d], classes, Split::Train)?,
        feature_names,
        dropped,
    })
}

/// Binary classification data drawn from two Gaussian classes whose
/// features share a low-dimensional latent structure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub features: usize,
    pub latent: usize,
    /// Distance between the class means along their separating direction,
    /// in units of the per-feature noise.
    pub separation: f64,
    /// Fraction of samples in class 1.
    pub positive_rate: f64,
}

impl SyntheticSpec {
    /// Dimensions of the breast-cancer diagnosis table: 569 × 30.
    pub fn wbcd() -> Self {
        SyntheticSpec { samples: 569, features: 30, latent: 6, separation: 3.0, positive_rate: 0.37 }
    }

    /// Dimensions of the voice-recording Parkinson's table: 195 × 22.
    pub fn parkinsons() -> Self {
        SyntheticSpec { samples: 195, features: 22, latent: 5, separation: 2.5, positive_rate: 0.75 }
    }

    /// Few samples, many features: the regime where a wide random layer overfits.
    pub fn high_dimensional() -> Self {
        SyntheticSpec { samples: 120, features: 400, latent: 4, separation: 1.5, positive_rate: 0.5 }
    }

    pub fn generate(&self, rng: &mut impl Rng) -> Result<Dataset> {
        if self.samples == 0 || self.features == 0 || self.latent == 0 {
            return Err(Error::Config("synthetic data needs positive sizes".into()));
        }
        let (d, k) = (self.features, self.latent);
        let mut gauss = || -> f64 { rng.sample(StandardNormal) };
        let mixing: Vec<f64> = (0..d * k).map(|_| gauss() / (k as f64).sqrt()).collect();
        let mut dir: Vec<f64> = (0..d).map(|_| gauss()).collect();
        let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|x| *x /= n);
        // Mixed-in nonlinearity so a linear readout on raw features is not optimal.
        let bend: Vec<f64> = (0..d).map(|_| 0.3 * gauss()).collect();
        let mut features = Vec::with_capacity(self.samples * d);
        let mut labels = Vec::with_capacity(self.samples);
        for _ in 0..self.samples {
            let y = usize::from(rng.random::<f64>() < self.positive_rate);
            let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            let shift = if y == 1 { self.separation / 2.0 } else { -self.separation / 2.0 };
            for j in 0..d {
                let latent: f64 = (0..k).map(|a| mixing[j * k + a] * z[a]).sum();
                let e: f64 = rng.sample(StandardNormal);
                features.push(latent + shift * dir[j] + bend[j] * z[0] * z[0] + 0.6 * e);
            }
            labels.push(y);
        }
        Dataset::new(features, labels, vec![d], 2, Split::Train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_classes_relabels() {
        let ds = Dataset::new(vec![0.0, 1.0, 2.0, 3.0], vec![3, 1, 3, 0], vec![1], 4, Split::Train).unwrap();
        let s = ds.select_classes(&[3, 0]);
        assert_eq!(s.labels, vec![0, 0, 1]);
        assert_eq!(s.features, vec![0.0, 2.0, 3.0]);
        assert_eq!(s.classes, 2);
    }

    #[test]
    fn stride_subsampling() {
        let ds = Dataset::new((0..10).map(|x| x as f64).collect(), vec![0], vec![10], 1, Split::Train).unwrap();
        assert_eq!(ds.subsample_features(5).unwrap().features, vec![0.0, 2.0, 4.0, 6.0, 8.0]);
        assert!(ds.subsample_features(11).is_err());
    }
}

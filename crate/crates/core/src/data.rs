//! Datasets: MNIST IDX files, seeded synthetic 2-D generators, splits and
//! one-hot targets.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub one_hot: Matrix,
    pub classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if !inputs.is_finite() {
            return Err(Error::Consistency("non-finite input value".into()));
        }
        let one_hot = one_hot_encode(&labels, classes)?;
        Ok(Dataset {
            inputs,
            labels,
            one_hot,
            classes,
            name: name.into(),
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

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            one_hot: self.one_hot.select_rows(indices),
            classes: self.classes,
            name: self.name.clone(),
        }
    }

    /// Seeded uniform sample of `size` rows without replacement, in
    /// original order. Saturates to the whole dataset.
    pub fn sample(&self, size: usize, seed: u64) -> Dataset {
        if size >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, self.len(), size).into_vec();
        idx.sort_unstable();
        self.subset(&idx)
    }

    /// Subtracts the per-feature mean of this dataset; returns the mean so it
    /// can be applied to a paired test set.
    pub fn center(&mut self) -> Vec<f64> {
        let mean = column_means(&self.inputs);
        self.apply_shift(&mean);
        mean
    }

    pub fn apply_shift(&mut self, mean: &[f64]) {
        for r in 0..self.inputs.rows() {
            for (v, m) in self.inputs.row_mut(r).iter_mut().zip(mean) {
                *v -= m;
            }
        }
    }

    /// CSV with header `x0,…,x{d-1},label`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        writeln!(w, "{}", header.join(","))?;
        for (row, label) in self.inputs.row_iter().zip(&self.labels) {
            let mut fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            fields.push(label.to_string());
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let n = m.rows().max(1) as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    mean
}

pub fn one_hot_encode(labels: &[usize], classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Consistency(format!(
                "label {l} at row {i} outside [0, {classes})"
            )));
        }
        m[(i, l)] = 1.0;
    }
    Ok(m)
}

/// Row-wise argmax of a one-hot (or score) matrix.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows()).map(|r| m.argmax_row(r)).collect()
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Length {
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Raw IDX image payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..expected].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

pub fn write_idx_images<W: Write>(images: &IdxImages, mut w: W) -> Result<()> {
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    for d in [images.count, images.rows, images.cols] {
        w.write_all(&(d as u32).to_be_bytes())?;
    }
    w.write_all(&images.pixels)?;
    Ok(())
}

pub fn write_idx_labels<W: Write>(labels: &[u8], mut w: W) -> Result<()> {
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    Ok(())
}

/// Builds a dataset from parsed IDX images and labels, scaling pixels to [0, 1].
pub fn mnist_from_idx(images: &IdxImages, labels: &[u8], name: &str) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let dim = images.rows * images.cols;
    let data = images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let inputs = Matrix::new(images.count, dim, data)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(name, inputs, labels, classes)
}

pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = parse_idx_images(&std::fs::read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    let name = images_path
        .as_ref()
        .file_name()
        .map_or_else(|| "mnist".to_string(), |n| n.to_string_lossy().into_owned());
    mnist_from_idx(&images, &labels, &name)
}

/// Two isotropic unit-variance Gaussian classes centred at `±(separation/2, 0)`.
pub fn gen_two_gaussians(n_per_class: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Contract("n_per_class must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for class in 0..2 {
        let cx = if class == 0 { -separation / 2.0 } else { separation / 2.0 };
        for _ in 0..n_per_class {
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            rows.push([cx + dx, dy]);
            labels.push(class);
        }
    }
    Dataset::new("two_gaussians", Matrix::from_rows(&rows)?, labels, 2)
}

/// Two interleaved spiral arms (1.5 turns, radius up to 1) with Gaussian
/// perturbation of standard deviation `noise`.
pub fn gen_spirals(n_per_class: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Contract("n_per_class must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for class in 0..2 {
        for _ in 0..n_per_class {
            let s: f64 = rng.gen_range(0.05..1.0);
            let angle = 3.0 * PI * s + class as f64 * PI;
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            rows.push([s * angle.cos() + noise * dx, s * angle.sin() + noise * dy]);
            labels.push(class);
        }
    }
    Dataset::new("spirals", Matrix::from_rows(&rows)?, labels, 2)
}

/// Seeded shuffle, then partition into two parts of the given fractions.
pub fn split(data: &Dataset, fractions: (f64, f64), seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = fractions;
    if !(a > 0.0 && b > 0.0) || (a + b - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "split fractions must be positive and sum to 1, got ({a}, {b})"
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let first = ((data.len() as f64) * a).round() as usize;
    let (head, tail) = order.split_at(first.min(data.len()));
    Ok((data.subset(head), data.subset(tail)))
}

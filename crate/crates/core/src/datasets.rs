//! MNIST-family datasets: IDX ingestion, mirrored and Gaussian control sets,
//! and cross-dataset free-energy tables.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cert::mean_std;
use crate::energy::ModelParams;
use crate::error::{LrrnError, Result};
use crate::inference::{InferenceConfig, Solver};
use crate::par;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Original(String),
    Mirrored(String),
    GaussianFit(String),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Original(n) => write!(f, "{n}"),
            Provenance::Mirrored(n) => write!(f, "{n} (mirrored)"),
            Provenance::GaussianFit(n) => write!(f, "{n} (fitted gaussian)"),
        }
    }
}

/// Images as row-major vectors with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Vec<f64>>,
    pub labels: Option<Vec<u8>>,
    /// `(rows, cols)` of every image.
    pub shape: (usize, usize),
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        images: Vec<Vec<f64>>,
        labels: Option<Vec<u8>>,
        shape: (usize, usize),
        provenance: Provenance,
    ) -> Result<Self> {
        let dim = shape.0 * shape.1;
        for (i, img) in images.iter().enumerate() {
            if img.len() != dim {
                return Err(LrrnError::InvalidConfig(format!("image {i} has {} pixels, expected {dim}", img.len())));
            }
            if !img.iter().all(|p| (0.0..=1.0).contains(p)) {
                return Err(LrrnError::InvalidConfig(format!("image {i} has pixels outside [0, 1]")));
            }
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(LrrnError::CountMismatch { images: images.len(), labels: l.len() });
            }
        }
        Ok(Dataset { images, labels, shape, provenance })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn name(&self) -> String {
        self.provenance.to_string()
    }

    pub fn label(&self, i: usize) -> Option<u8> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Number of classes implied by the largest label.
    pub fn num_classes(&self) -> usize {
        self.labels.as_ref().and_then(|l| l.iter().max()).map_or(0, |&m| m as usize + 1)
    }

    /// Samples `[start, start + len)`, clipped to the dataset size.
    pub fn slice(&self, start: usize, len: usize) -> Dataset {
        let start = start.min(self.len());
        let end = (start + len).min(self.len());
        Dataset {
            images: self.images[start..end].to_vec(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
            shape: self.shape,
            provenance: self.provenance.clone(),
        }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }
}

/// One-hot encoding of `label` in `classes` dimensions.
pub fn one_hot(label: u8, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label as usize] = 1.0;
    v
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(LrrnError::Truncated { expected: offset + 4, found: bytes.len() })
}

/// Parses an IDX image file, keeping at most `limit` images.
pub fn parse_idx_images(bytes: &[u8], limit: Option<usize>) -> Result<(Vec<Vec<f64>>, (usize, usize))> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(LrrnError::WrongMagic { expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    let expected = 16 + count * dim;
    if bytes.len() < expected {
        return Err(LrrnError::Truncated { expected, found: bytes.len() });
    }
    let n = limit.map_or(count, |l| l.min(count));
    let images = bytes[16..16 + n * dim]
        .chunks_exact(dim.max(1))
        .map(|px| px.iter().map(|&p| p as f64 / 255.0).collect())
        .collect();
    Ok((images, (rows, cols)))
}

/// Parses an IDX label file, keeping at most `limit` labels.
pub fn parse_idx_labels(bytes: &[u8], limit: Option<usize>) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(LrrnError::WrongMagic { expected: IDX_LABELS_MAGIC, found: magic });
    }
    let count = read_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(LrrnError::Truncated { expected, found: bytes.len() });
    }
    let n = limit.map_or(count, |l| l.min(count));
    Ok(bytes[8..8 + n].to_vec())
}

/// Loads an IDX image file and, optionally, its label file.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    load_idx_limit(images_path, labels_path, None)
}

pub fn load_idx_limit(images_path: &Path, labels_path: Option<&Path>, limit: Option<usize>) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let image_count = read_u32(&img_bytes, 4).unwrap_or(0) as usize;
    let (images, shape) = parse_idx_images(&img_bytes, limit)?;
    let labels = match labels_path {
        Some(p) => {
            let lbl_bytes = fs::read(p)?;
            let label_count = read_u32(&lbl_bytes, 4)? as usize;
            let labels = parse_idx_labels(&lbl_bytes, limit)?;
            if label_count != image_count {
                return Err(LrrnError::CountMismatch { images: image_count, labels: label_count });
            }
            Some(labels)
        }
        None => None,
    };
    let name = images_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| images_path.display().to_string());
    Dataset::new(images, labels, shape, Provenance::Original(name))
}

/// Loads `<dir>/<split>-images-idx3-ubyte` and `<dir>/<split>-labels-idx1-ubyte`,
/// where `split` is `train` or `t10k`.
pub fn load_split(dir: &Path, split: &str, limit: Option<usize>) -> Result<Dataset> {
    let images = dir.join(format!("{split}-images-idx3-ubyte"));
    let labels = dir.join(format!("{split}-labels-idx1-ubyte"));
    let labels = labels.exists().then_some(labels);
    load_idx_limit(&images, labels.as_deref(), limit)
}

/// Encodes images (pixels rounded from `[0,1]` to bytes) as an IDX file.
pub fn encode_idx_images(images: &[Vec<f64>], shape: (usize, usize)) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * shape.0 * shape.1);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(shape.0 as u32).to_be_bytes());
    out.extend_from_slice(&(shape.1 as u32).to_be_bytes());
    for img in images {
        out.extend(img.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Reverses every image row (horizontal flip).
pub fn mirror(dataset: &Dataset) -> Dataset {
    let (rows, cols) = dataset.shape;
    let images = dataset
        .images
        .iter()
        .map(|img| {
            let mut out = Vec::with_capacity(img.len());
            for r in 0..rows {
                out.extend(img[r * cols..(r + 1) * cols].iter().rev());
            }
            out
        })
        .collect();
    let base = match &dataset.provenance {
        Provenance::Original(n) | Provenance::Mirrored(n) | Provenance::GaussianFit(n) => n.clone(),
    };
    Dataset { images, labels: dataset.labels.clone(), shape: dataset.shape, provenance: Provenance::Mirrored(base) }
}

/// Per-pixel independent Gaussian fitted to a dataset; draws are clamped to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    shape: (usize, usize),
    source: String,
    rng: ChaCha8Rng,
}

impl GaussianSampler {
    /// Fits per-pixel mean and population variance.
    pub fn fit(dataset: &Dataset, seed: u64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(LrrnError::EmptyDataset);
        }
        let n = dataset.len() as f64;
        let dim = dataset.dim();
        let mut mean = vec![0.0; dim];
        for img in &dataset.images {
            mean.iter_mut().zip(img).for_each(|(m, p)| *m += p);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for img in &dataset.images {
            for ((v, p), m) in var.iter_mut().zip(img).zip(&mean) {
                *v += (p - m) * (p - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        Ok(GaussianSampler {
            mean,
            std,
            shape: dataset.shape,
            source: dataset.name(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sample(&mut self) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(&m, &s)| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                (m + s * z).clamp(0.0, 1.0)
            })
            .collect()
    }

    pub fn sample_dataset(&mut self, n: usize) -> Dataset {
        let images = (0..n).map(|_| self.sample()).collect();
        Dataset { images, labels: None, shape: self.shape, provenance: Provenance::GaussianFit(self.source.clone()) }
    }
}

pub fn fit_gaussian_sampler(dataset: &Dataset, seed: u64) -> Result<GaussianSampler> {
    GaussianSampler::fit(dataset, seed)
}

/// Free energies `min_z E(z; x)` of every sample.
pub fn free_energies(params: &ModelParams, dataset: &Dataset, cfg: &InferenceConfig) -> Result<Vec<f64>> {
    let solver = Solver::new(params)?;
    par::map_indexed(dataset.len(), |i| {
        solver.infer_free(&dataset.images[i], cfg).map(|inf| inf.energy).map_err(|e| e.at_sample(i))
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyCell {
    pub mean: f64,
    pub std: f64,
}

/// Mean ± std free energy of each model (rows) on each test set (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyTable {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<Vec<EnergyCell>>,
}

pub fn energy_table(
    models: &[(String, &ModelParams)],
    test_sets: &[(String, &Dataset)],
    cfg: &InferenceConfig,
) -> Result<EnergyTable> {
    let mut cells = Vec::with_capacity(models.len());
    for (_, model) in models {
        let mut row = Vec::with_capacity(test_sets.len());
        for (_, set) in test_sets {
            if set.is_empty() {
                return Err(LrrnError::EmptyDataset);
            }
            let (mean, std) = mean_std(&free_energies(model, set, cfg)?);
            row.push(EnergyCell { mean, std });
        }
        cells.push(row);
    }
    Ok(EnergyTable {
        rows: models.iter().map(|(n, _)| n.clone()).collect(),
        columns: test_sets.iter().map(|(n, _)| n.clone()).collect(),
        cells,
    })
}

pub const MIRRORED_COLUMN: &str = "Mirrored";
pub const GAUSSIAN_COLUMN: &str = "Fitted Gaussian";

/// One model row of a table with per-model control columns.
#[derive(Debug, Clone, Copy)]
pub struct ControlRow<'a> {
    pub name: &'a str,
    pub model: &'a ModelParams,
    /// The model's own test set; its mirror image fills the "Mirrored" column.
    pub own_test: &'a Dataset,
    /// Samples from a Gaussian fitted to the model's training set.
    pub gaussian: &'a Dataset,
}

/// [`energy_table`] over the shared test sets, followed by two columns that
/// differ per row: the row model's own test set mirrored, and samples from a
/// Gaussian fitted to its training data.
pub fn energy_table_with_controls(
    rows: &[ControlRow<'_>],
    test_sets: &[(String, &Dataset)],
    cfg: &InferenceConfig,
) -> Result<EnergyTable> {
    let models: Vec<(String, &ModelParams)> = rows.iter().map(|r| (r.name.to_string(), r.model)).collect();
    let mut table = energy_table(&models, test_sets, cfg)?;
    for (row, cells) in rows.iter().zip(&mut table.cells) {
        for set in [&mirror(row.own_test), row.gaussian] {
            if set.is_empty() {
                return Err(LrrnError::EmptyDataset);
            }
            let (mean, std) = mean_std(&free_energies(row.model, set, cfg)?);
            cells.push(EnergyCell { mean, std });
        }
    }
    table.columns.push(MIRRORED_COLUMN.into());
    table.columns.push(GAUSSIAN_COLUMN.into());
    Ok(table)
}

impl EnergyTable {
    pub fn render_text(&self) -> String {
        let cell_text: Vec<Vec<String>> =
            self.cells.iter().map(|r| r.iter().map(|c| format!("{:.1}±{:.1}", c.mean, c.std)).collect()).collect();
        let label = "min_z E(z;x)";
        let row_w = self.rows.iter().map(|r| r.chars().count()).max().unwrap_or(0).max(label.len());
        let col_w: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(j, c)| {
                cell_text
                    .iter()
                    .map(|r| r[j].chars().count())
                    .chain(std::iter::once(c.chars().count()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let _ = write!(out, "{label:<row_w$}");
        for (c, w) in self.columns.iter().zip(&col_w) {
            let _ = write!(out, " | {c:>w$}");
        }
        out.push('\n');
        for (name, row) in self.rows.iter().zip(&cell_text) {
            let _ = write!(out, "{name:<row_w$}");
            for (cell, w) in row.iter().zip(&col_w) {
                let pad = w.saturating_sub(cell.chars().count());
                let _ = write!(out, " | {}{cell}", " ".repeat(pad));
            }
            out.push('\n');
        }
        out
    }

    /// `model,test_set,mean,std` with full-precision floats.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("model,test_set,mean,std\n");
        for (name, row) in self.rows.iter().zip(&self.cells) {
            for (col, cell) in self.columns.iter().zip(row) {
                let _ = writeln!(out, "{name},{col},{:?},{:?}", cell.mean, cell.std);
            }
        }
        out
    }

    /// Index of the smallest and largest mean in each row.
    pub fn row_extrema(&self) -> Vec<(usize, usize)> {
        self.cells
            .iter()
            .map(|row| {
                let argmin = (0..row.len()).min_by(|&a, &b| row[a].mean.total_cmp(&row[b].mean)).unwrap_or(0);
                let argmax = (0..row.len()).max_by(|&a, &b| row[a].mean.total_cmp(&row[b].mean)).unwrap_or(0);
                (argmin, argmax)
            })
            .collect()
    }
}

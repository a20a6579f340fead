//! Multi-subject, multi-modality image collections.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::DenseTensor;

/// N subjects x M modalities of equally-shaped dense tensors, an optional
/// binary label per subject, and a missingness mask (a `None` cell).
#[derive(Debug, Clone)]
pub struct MultimodalDataset {
    dims: Vec<usize>,
    images: Vec<Vec<Option<DenseTensor>>>,
    labels: Option<Vec<u8>>,
}

impl MultimodalDataset {
    pub fn new(images: Vec<Vec<Option<DenseTensor>>>, labels: Option<Vec<u8>>) -> Result<Self> {
        if images.is_empty() || images[0].is_empty() {
            return Err(Error::InvalidArgument(
                "dataset needs at least one subject and one modality".into(),
            ));
        }
        let m = images[0].len();
        if images.iter().any(|row| row.len() != m) {
            return Err(Error::ShapeMismatch(
                "subjects have differing modality counts".into(),
            ));
        }
        let dims = images
            .iter()
            .flatten()
            .find_map(|c| c.as_ref().map(|t| t.dims().to_vec()))
            .ok_or_else(|| Error::InvalidArgument("dataset has no present images".into()))?;
        for row in &images {
            for cell in row.iter().flatten() {
                if cell.dims() != dims.as_slice() {
                    return Err(Error::ShapeMismatch(format!(
                        "image dims {:?} differ from {:?}",
                        cell.dims(),
                        dims
                    )));
                }
            }
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::ShapeMismatch("label count != subject count".into()));
            }
            if l.iter().any(|&y| y > 1) {
                return Err(Error::InvalidArgument("labels must be 0/1".into()));
            }
        }
        Ok(Self { dims, images, labels })
    }

    pub fn n_subjects(&self) -> usize {
        self.images.len()
    }

    pub fn n_modalities(&self) -> usize {
        self.images[0].len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Elements per image.
    pub fn image_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn image(&self, subject: usize, modality: usize) -> Option<&DenseTensor> {
        self.images[subject][modality].as_ref()
    }

    pub fn present(&self, subject: usize, modality: usize) -> bool {
        self.images[subject][modality].is_some()
    }

    /// Number of present single-modality images (the paper's |I|).
    pub fn present_count(&self) -> usize {
        self.images.iter().flatten().filter(|c| c.is_some()).count()
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn set_labels(&mut self, labels: Option<Vec<u8>>) -> Result<()> {
        if let Some(l) = &labels {
            if l.len() != self.n_subjects() {
                return Err(Error::ShapeMismatch("label count != subject count".into()));
            }
        }
        self.labels = labels;
        Ok(())
    }

    /// Images of one subject across modalities; errors if any are missing.
    pub fn subject_images(&self, subject: usize) -> Result<Vec<DenseTensor>> {
        self.images[subject]
            .iter()
            .map(|c| {
                c.clone()
                    .ok_or_else(|| Error::InvalidArgument("missing modality image".into()))
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.images
            .iter()
            .flatten()
            .flatten()
            .all(DenseTensor::is_finite)
    }

    /// Stacks subjects of several datasets (same modality count and dims).
    pub fn concat(parts: &[&MultimodalDataset]) -> Result<MultimodalDataset> {
        let mut images = Vec::new();
        let mut labels = Some(Vec::new());
        for p in parts {
            images.extend(p.images.iter().cloned());
            match (&mut labels, p.labels()) {
                (Some(acc), Some(l)) => acc.extend_from_slice(l),
                _ => labels = None,
            }
        }
        MultimodalDataset::new(images, labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<MultimodalDataset> {
        let images = indices.iter().map(|&i| self.images[i].clone()).collect();
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        MultimodalDataset::new(images, labels)
    }

    /// The aligned tensor of one modality: dims `(N, p_1, ..., p_D)` with
    /// missing slices zero-filled.
    pub fn aligned_modality(&self, modality: usize) -> DenseTensor {
        let n = self.n_subjects();
        let mut dims = vec![n];
        dims.extend_from_slice(&self.dims);
        let mut out = DenseTensor::zeros(&dims);
        for (i, row) in self.images.iter().enumerate() {
            if let Some(img) = &row[modality] {
                let vals = out.values_mut();
                for (q, &v) in img.values().iter().enumerate() {
                    vals[i + n * q] = v;
                }
            }
        }
        out
    }

    /// The fully integrated tensor `(N, p_1, ..., p_D, M)` used by the
    /// homogeneous baseline; errors if any image is missing.
    pub fn integrated_tensor(&self) -> Result<DenseTensor> {
        let (n, m, p) = (self.n_subjects(), self.n_modalities(), self.image_len());
        let mut dims = vec![n];
        dims.extend_from_slice(&self.dims);
        dims.push(m);
        let mut out = DenseTensor::zeros(&dims);
        for (i, row) in self.images.iter().enumerate() {
            for (k, cell) in row.iter().enumerate() {
                let img = cell
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("missing image in integration".into()))?;
                let vals = out.values_mut();
                for (q, &v) in img.values().iter().enumerate() {
                    vals[i + n * (q + p * k)] = v;
                }
            }
        }
        Ok(out)
    }

    pub fn scaled(&self, c: f64) -> MultimodalDataset {
        let images = self
            .images
            .iter()
            .map(|row| {
                row.iter()
                    .map(|cell| {
                        cell.clone().map(|mut t| {
                            t.scale(c);
                            t
                        })
                    })
                    .collect()
            })
            .collect();
        MultimodalDataset {
            dims: self.dims.clone(),
            images,
            labels: self.labels.clone(),
        }
    }

    /// Writes the dataset as a directory: `manifest.json`, one IMTD file per
    /// present image, and `labels.csv` (`subject_id,label`) when labeled.
    pub fn save_dir<P: AsRef<Path>>(&self, dir: P) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (i, row) in self.images.iter().enumerate() {
            let mut names = Vec::new();
            for (m, cell) in row.iter().enumerate() {
                match cell {
                    Some(img) => {
                        let name = format!("subject{i:04}_modality{m}.imtd");
                        io::save_tensor(dir.join(&name), img)?;
                        names.push(Some(name));
                    }
                    None => names.push(None),
                }
            }
            files.push(names);
        }
        let manifest = DatasetManifest {
            n_subjects: self.n_subjects(),
            n_modalities: self.n_modalities(),
            dims: self.dims.clone(),
            files,
            has_labels: self.labels.is_some(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        if let Some(labels) = &self.labels {
            let mut csv = String::from("subject_id,label\n");
            for (i, y) in labels.iter().enumerate() {
                csv.push_str(&format!("{i},{y}\n"));
            }
            fs::write(dir.join("labels.csv"), csv)?;
        }
        Ok(())
    }

    pub fn load_dir<P: AsRef<Path>>(dir: P) -> Result<MultimodalDataset> {
        let dir = dir.as_ref();
        let manifest: DatasetManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut images = Vec::with_capacity(manifest.n_subjects);
        for row in &manifest.files {
            let mut cells = Vec::with_capacity(manifest.n_modalities);
            for name in row {
                cells.push(match name {
                    Some(name) => Some(io::load_tensor(dir.join(name))?),
                    None => None,
                });
            }
            images.push(cells);
        }
        let labels = if manifest.has_labels {
            let text = fs::read_to_string(dir.join("labels.csv"))?;
            let mut labels = vec![0u8; manifest.n_subjects];
            for line in text.lines().skip(1) {
                let mut parts = line.split(',');
                let id: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format("bad labels.csv row".into()))?;
                let y: u8 = parts
                    .next()
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Format("bad labels.csv row".into()))?;
                labels[id] = y;
            }
            Some(labels)
        } else {
            None
        };
        MultimodalDataset::new(images, labels)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    n_subjects: usize,
    n_modalities: usize,
    dims: Vec<usize>,
    files: Vec<Vec<Option<String>>>,
    has_labels: bool,
}

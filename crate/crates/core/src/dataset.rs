//! In-memory trial data: images, treatments, outcomes and optional tabular
//! covariates, all aligned by unit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::arm::InputDims;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageDims {
    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Per-column standardization applied at load time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tabular {
    pub names: Vec<String>,
    /// Row-major `n x d`.
    pub values: Vec<f64>,
    pub transform: Vec<ColumnTransform>,
}

impl Tabular {
    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.width();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().skip(j).step_by(self.width()).copied().collect()
    }

    /// Standardizes every column in place to mean 0, population sd 1 and
    /// records the transform. Constant columns are centred only.
    pub fn standardize(names: Vec<String>, mut values: Vec<f64>) -> Result<Self> {
        let d = names.len();
        if d == 0 || values.len() % d != 0 {
            return Err(Error::invalid("tabular: values do not tile the named columns"));
        }
        let mut transform = Vec::with_capacity(d);
        for (j, name) in names.iter().enumerate() {
            let col: Vec<f64> = values.iter().skip(j).step_by(d).copied().collect();
            let mean = crate::stats::mean(&col);
            let sd = crate::stats::population_sd(&col);
            let div = if sd > 0.0 { sd } else { 1.0 };
            for v in values.iter_mut().skip(j).step_by(d) {
                *v = (*v - mean) / div;
            }
            transform.push(ColumnTransform { name: name.clone(), mean, sd });
        }
        Ok(Self { names, values, transform })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialDataset {
    pub dims: ImageDims,
    /// `n x H x W x C`, row-major.
    pub images: Vec<f64>,
    pub y: Vec<f64>,
    pub t: Vec<u8>,
    pub tabular: Option<Tabular>,
    pub ids: Vec<String>,
}

impl TrialDataset {
    pub fn new(dims: ImageDims, images: Vec<f64>, y: Vec<f64>, t: Vec<u8>, tabular: Option<Tabular>) -> Result<Self> {
        let ids = (0..y.len()).map(|i| i.to_string()).collect();
        let d = Self {
            dims,
            images,
            y,
            t,
            tabular,
            ids,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.images.len() != n * self.dims.pixels() {
            return Err(Error::shape("dataset", "image values", n * self.dims.pixels(), self.images.len()));
        }
        if self.t.len() != n {
            return Err(Error::shape("dataset", "treatments", n, self.t.len()));
        }
        if self.ids.len() != n {
            return Err(Error::shape("dataset", "ids", n, self.ids.len()));
        }
        if let Some(row) = self.t.iter().position(|t| *t > 1) {
            return Err(Error::NonBinaryTreatment {
                row,
                value: self.t[row].to_string(),
            });
        }
        if let Some(i) = self.y.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("dataset: outcome for unit {i} is not finite")));
        }
        if let Some(tab) = &self.tabular {
            if tab.values.len() != n * tab.width() {
                return Err(Error::shape("dataset", "tabular values", n * tab.width(), tab.values.len()));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for id in &self.ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn tabular_width(&self) -> usize {
        self.tabular.as_ref().map_or(0, Tabular::width)
    }

    pub fn input_dims(&self) -> InputDims {
        InputDims {
            height: self.dims.height,
            width: self.dims.width,
            channels: self.dims.channels,
            tabular: self.tabular_width(),
        }
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.dims.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn t_f64(&self) -> Vec<f64> {
        self.t.iter().map(|v| f64::from(*v)).collect()
    }

    /// Image batch `[B, H, W, C]` for the given units.
    pub fn image_batch(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.dims.pixels());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![idx.len(), self.dims.height, self.dims.width, self.dims.channels], data).expect("batch shape")
    }

    /// Tabular batch `[B, D]`, if covariates are present.
    pub fn tabular_batch(&self, idx: &[usize]) -> Option<Tensor> {
        self.tabular.as_ref().map(|tab| {
            let data = idx.iter().flat_map(|&i| tab.row(i).iter().copied()).collect();
            Tensor::new(vec![idx.len(), tab.width()], data).expect("tabular shape")
        })
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            dims: self.dims,
            images: idx.iter().flat_map(|&i| self.image(i).iter().copied()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            tabular: self.tabular.as_ref().map(|tab| Tabular {
                names: tab.names.clone(),
                values: idx.iter().flat_map(|&i| tab.row(i).iter().copied()).collect(),
                transform: tab.transform.clone(),
            }),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    /// Errors unless both arms are represented.
    pub fn require_both_arms(&self) -> Result<()> {
        if !self.t.contains(&1) {
            return Err(Error::EmptyArm("treated"));
        }
        if !self.t.contains(&0) {
            return Err(Error::EmptyArm("control"));
        }
        Ok(())
    }
}

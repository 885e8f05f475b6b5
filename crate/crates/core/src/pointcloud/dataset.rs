use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{invalid, Result};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Clouds with integer labels in `0..class_names.len()`. All clouds share `N` and `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset<T> {
    clouds: Vec<PointCloud<T>>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    split: Split,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(
        clouds: Vec<PointCloud<T>>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        split: Split,
    ) -> Result<Self> {
        if clouds.len() != labels.len() {
            return Err(invalid(format!("{} clouds but {} labels", clouds.len(), labels.len())));
        }
        if class_names.is_empty() {
            return Err(invalid("dataset needs at least one class"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(invalid(format!("label {bad} out of range for {} classes", class_names.len())));
        }
        if let Some(first) = clouds.first() {
            let (n, d) = (first.n_points(), first.dim());
            if clouds.iter().any(|c| c.n_points() != n || c.dim() != d) {
                return Err(invalid("all clouds in a dataset must share N and D"));
            }
        }
        Ok(Self { clouds, labels, class_names, split })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn clouds(&self) -> &[PointCloud<T>] {
        &self.clouds
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// `(N, D)` of the member clouds, if any.
    pub fn cloud_shape(&self) -> Option<(usize, usize)> {
        self.clouds.first().map(|c| (c.n_points(), c.dim()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PointCloud<T>, usize)> {
        self.clouds.iter().zip(self.labels.iter().copied())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of samples carrying `label`.
    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == label).map(|(i, _)| i).collect()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

use crate::error::{Error, Result};
use crate::ndtensor::SeededRng;
use crate::Tensor64;

/// Inputs with integer class labels. The first axis of `inputs` indexes samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor64,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor64, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "batch has {} inputs but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape (everything after the sample axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Concatenates batches along the sample axis.
    pub fn concat(batches: &[Batch]) -> Result<Batch> {
        let first = batches.first().ok_or_else(|| Error::Shape("no batches to concatenate".into()))?;
        let sample = first.sample_shape().to_vec();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for b in batches {
            if b.sample_shape() != sample.as_slice() {
                return Err(Error::Shape("batches with different sample shapes".into()));
            }
            data.extend_from_slice(b.inputs.data());
            labels.extend_from_slice(&b.labels);
        }
        let mut shape = vec![labels.len()];
        shape.extend(sample);
        Batch::new(Tensor64::new(shape, data)?, labels)
    }
}

/// A labelled sample collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor64,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor64, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Shape("inputs and labels disagree on sample count".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Shape(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { inputs, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Shape("empty subset".into()));
        }
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Shape(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.inputs.data()[i * len..(i + 1) * len]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Batch::new(Tensor64::new(shape, data)?, labels)
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> Batch {
        Batch { inputs: self.inputs.clone(), labels: self.labels.clone() }
    }

    /// Shuffled mini-batches covering every sample once; the last one may be short.
    pub fn epoch_batches(&self, batch_size: usize, rng: &mut SeededRng) -> Result<Vec<Batch>> {
        let order = rng.permutation(self.len());
        order.chunks(batch_size.max(1)).map(|idx| self.subset(idx)).collect()
    }

    /// `count` batches of `batch_size` samples drawn without replacement within each batch.
    pub fn random_batches(&self, count: usize, batch_size: usize, rng: &mut SeededRng) -> Result<Vec<Batch>> {
        (0..count)
            .map(|_| {
                let order = rng.permutation(self.len());
                self.subset(&order[..batch_size.min(self.len())])
            })
            .collect()
    }

    /// Splits off the first `round(fraction · n)` samples of a shuffled order as the first part.
    pub fn split(&self, fraction: f64, rng: &mut SeededRng) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
            return Err(Error::Config(format!("split fraction must be in (0,1), got {fraction}")));
        }
        let order = rng.permutation(self.len());
        let cut = ((self.len() as f64) * fraction).round() as usize;
        let cut = cut.clamp(1, self.len() - 1);
        let to_ds = |idx: &[usize]| -> Result<Dataset> {
            let b = self.subset(idx)?;
            Dataset::new(b.inputs, b.labels, self.num_classes)
        };
        Ok((to_ds(&order[..cut])?, to_ds(&order[cut..])?))
    }
}

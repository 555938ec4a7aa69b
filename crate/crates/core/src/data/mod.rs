//! Multi-domain click datasets.
//!
//! A [`Sample`] carries the domain indicator, one id per categorical feature
//! field, a group id (user or query, used by grouped metrics) and a binary
//! label. Datasets are validated on construction and immutable afterwards.

mod csv_io;
mod synthetic;

pub use csv_io::{load_csv, write_csv, CsvSchema};
pub use synthetic::{generate_synthetic, SyntheticGenerator, SyntheticSpec};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub domain_id: usize,
    pub group_id: u64,
    pub feature_ids: Vec<usize>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_domains: usize,
    vocab_sizes: Vec<usize>,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(n_domains: usize, vocab_sizes: Vec<usize>, samples: Vec<Sample>) -> Result<Self> {
        if n_domains == 0 {
            return Err(Error::Data("dataset needs at least one domain".into()));
        }
        if let Some(f) = vocab_sizes.iter().position(|&v| v == 0) {
            return Err(Error::Data(format!("field f_{f} has an empty vocabulary")));
        }
        for (row, s) in samples.iter().enumerate() {
            if s.domain_id >= n_domains {
                return Err(Error::Data(format!(
                    "row {row}: domain_id {} outside 0..{n_domains}",
                    s.domain_id
                )));
            }
            if s.feature_ids.len() != vocab_sizes.len() {
                return Err(Error::Data(format!(
                    "row {row}: {} feature ids for {} fields",
                    s.feature_ids.len(),
                    vocab_sizes.len()
                )));
            }
            for (f, (&id, &vocab)) in s.feature_ids.iter().zip(&vocab_sizes).enumerate() {
                if id >= vocab {
                    return Err(Error::Data(format!(
                        "row {row}: field f_{f} id {id} outside vocabulary of {vocab}"
                    )));
                }
            }
            if s.label > 1 {
                return Err(Error::Data(format!(
                    "row {row}: label {} is not 0 or 1",
                    s.label
                )));
            }
        }
        Ok(Self {
            n_domains,
            vocab_sizes,
            samples,
        })
    }

    pub fn n_domains(&self) -> usize {
        self.n_domains
    }

    pub fn n_fields(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn vocab_sizes(&self) -> &[usize] {
        &self.vocab_sizes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch::gather(self, indices)
    }

    /// All samples, in order, as consecutive batches of at most `size` rows.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = Batch> + '_ {
        let all: Vec<usize> = (0..self.len()).collect();
        let size = size.max(1);
        (0..self.len().div_ceil(size)).map(move |b| {
            let end = ((b + 1) * size).min(all.len());
            self.batch(&all[b * size..end])
        })
    }

    /// Splits into (first, second) by a deterministic per-index rule: every
    /// `every`-th sample goes to the second part.
    pub fn split_every(&self, every: usize) -> Result<(Dataset, Dataset)> {
        let every = every.max(2);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, s) in self.samples.iter().enumerate() {
            if i % every == every - 1 {
                b.push(s.clone());
            } else {
                a.push(s.clone());
            }
        }
        Ok((
            Dataset::new(self.n_domains, self.vocab_sizes.clone(), a)?,
            Dataset::new(self.n_domains, self.vocab_sizes.clone(), b)?,
        ))
    }
}

/// Column-oriented view of a set of samples, ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub domains: Vec<usize>,
    /// `features[field][row]`.
    pub features: Vec<Vec<usize>>,
    pub labels: Vec<f64>,
    pub groups: Vec<u64>,
}

impl Batch {
    pub fn gather(dataset: &Dataset, indices: &[usize]) -> Self {
        let mut features = vec![Vec::with_capacity(indices.len()); dataset.n_fields()];
        let mut domains = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        let mut groups = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &dataset.samples[i];
            domains.push(s.domain_id);
            labels.push(f64::from(s.label));
            groups.push(s.group_id);
            for (col, &id) in features.iter_mut().zip(&s.feature_ids) {
                col.push(id);
            }
        }
        Self {
            domains,
            features,
            labels,
            groups,
        }
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }
}

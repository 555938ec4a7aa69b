use super::params::{Bound, ParamId, ParamStore};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use rand::Rng;

/// `y = x·W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Normal init with the given weight std and zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Matrix::random_normal(in_dim, out_dim, std, rng),
        );
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Tensor) -> Result<Tensor> {
        let xw = tape.matmul(x, p[self.weight])?;
        tape.add_row_bias(xw, p[self.bias])
    }
}

/// Stack of ReLU-activated linear layers. Every layer, including the last,
/// is followed by ReLU.
#[derive(Debug, Clone)]
pub struct ExpertMlp {
    pub layers: Vec<Linear>,
}

impl ExpertMlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Config(format!(
                "expert hidden sizes must be non-empty and positive, got {hidden:?}"
            )));
        }
        let mut layers = Vec::with_capacity(hidden.len());
        let mut d = in_dim;
        for (i, &h) in hidden.iter().enumerate() {
            let std = (2.0 / d as f64).sqrt();
            layers.push(Linear::new(store, &format!("{name}.l{i}"), d, h, std, rng));
            d = h;
        }
        Ok(Self { layers })
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Tensor) -> Result<Tensor> {
        let mut h = x;
        for layer in &self.layers {
            let z = layer.forward(tape, p, h)?;
            h = tape.relu(z);
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingField {
    pub name: String,
    pub vocab: usize,
}

/// One `vocab x dim` table per categorical field; the layer output is the
/// per-field rows concatenated in field order.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub fields: Vec<EmbeddingField>,
    pub dim: usize,
    pub tables: Vec<ParamId>,
}

impl EmbeddingTable {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        fields: Vec<EmbeddingField>,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || fields.is_empty() {
            return Err(Error::Config(
                "embedding needs dim > 0 and at least one field".into(),
            ));
        }
        let tables = fields
            .iter()
            .map(|f| {
                store.add(
                    format!("embedding.{}", f.name),
                    Matrix::random_normal(f.vocab, dim, std, rng),
                )
            })
            .collect();
        Ok(Self {
            fields,
            dim,
            tables,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.fields.len() * self.dim
    }

    /// `ids[field][row]` → `rows x (fields·dim)`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, ids: &[&[usize]]) -> Result<Tensor> {
        if ids.len() != self.fields.len() {
            return Err(Error::Data(format!(
                "embedding expects {} fields, got {}",
                self.fields.len(),
                ids.len()
            )));
        }
        let mut out: Option<Tensor> = None;
        for ((field, &table), col) in self.fields.iter().zip(&self.tables).zip(ids) {
            if let Some(row) = col.iter().position(|&id| id >= field.vocab) {
                return Err(Error::Data(format!(
                    "field {} row {row}: id {} outside vocabulary of {}",
                    field.name, col[row], field.vocab
                )));
            }
            let rows = tape.gather_rows(p[table], col)?;
            out = Some(match out {
                None => rows,
                Some(prev) => tape.concat_cols(prev, rows)?,
            });
        }
        Ok(out.expect("at least one field"))
    }
}

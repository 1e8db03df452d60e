//! Per-field embedding layer.
//!
//! Every field owns a table: `N_i × d` for categorical and multi-categorical
//! fields, `1 × d` for continuous ones. A field's embedding is a weighted sum
//! of table rows: weight 1 for a categorical index, `1/q` for each of the `q`
//! active indices of a multi-hot field, and the normalized value for a
//! continuous field.

use crate::data::{EncodedExample, FeatureSchema, FieldValue};
use crate::error::{Error, Result};
use crate::numerics::{axpy, Rng, Tensor};

pub const EMBEDDING_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    pub dim: usize,
    pub tables: Vec<Tensor>,
}

impl EmbeddingParams {
    pub fn new(schema: &FeatureSchema, dim: usize, rng: &mut Rng) -> Self {
        let tables = schema
            .fields
            .iter()
            .map(|f| Tensor::randn(&[f.cardinality(), dim], EMBEDDING_INIT_STD, rng))
            .collect();
        EmbeddingParams { dim, tables }
    }

    pub fn zeros(schema: &FeatureSchema, dim: usize) -> Self {
        let tables = schema
            .fields
            .iter()
            .map(|f| Tensor::zeros(&[f.cardinality(), dim]))
            .collect();
        EmbeddingParams { dim, tables }
    }

    pub fn fields(&self) -> usize {
        self.tables.len()
    }
}

/// Rows read by one forward pass, with their mixing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedTrace {
    pub active: Vec<Vec<(usize, f64)>>,
}

/// Gradient rows for the tables touched by one example.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingGrad {
    pub rows: Vec<(usize, usize, Vec<f64>)>,
}

impl EmbeddingGrad {
    pub fn accumulate_into(&self, dense: &mut EmbeddingParams) {
        for (field, row, g) in &self.rows {
            axpy(1.0, g, dense.tables[*field].row_mut(*row));
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, _, g) in self.rows.iter_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

fn activation(field: usize, value: &FieldValue, table: &Tensor) -> Result<Vec<(usize, f64)>> {
    let rows = table.rows();
    let check = |i: usize| {
        if i < rows {
            Ok(i)
        } else {
            Err(Error::Encoding(format!(
                "field {field}: index {i} out of range for {rows} rows"
            )))
        }
    };
    match value {
        FieldValue::Cat(i) => Ok(vec![(check(*i)?, 1.0)]),
        FieldValue::Multi(ix) => {
            if ix.is_empty() {
                return Err(Error::Encoding(format!(
                    "field {field}: empty multi-hot set"
                )));
            }
            let w = 1.0 / ix.len() as f64;
            ix.iter().map(|&i| Ok((check(i)?, w))).collect()
        }
        FieldValue::Num(x) => {
            if rows != 1 {
                return Err(Error::Encoding(format!(
                    "field {field}: continuous value for a {rows}-row table"
                )));
            }
            Ok(vec![(0, *x)])
        }
    }
}

/// Embeds an example into an `n × d` matrix, one row per field.
pub fn embed(example: &EncodedExample, params: &EmbeddingParams) -> Result<(Tensor, EmbedTrace)> {
    let n = params.fields();
    if example.values.len() != n {
        return Err(Error::Encoding(format!(
            "example has {} fields, embedding layer has {n}",
            example.values.len()
        )));
    }
    let d = params.dim;
    let mut out = Tensor::zeros(&[n, d]);
    let mut active = Vec::with_capacity(n);
    for (i, (value, table)) in example.values.iter().zip(&params.tables).enumerate() {
        let rows = activation(i, value, table)?;
        let dst = out.row_mut(i);
        for &(r, w) in &rows {
            axpy(w, table.row(r), dst);
        }
        active.push(rows);
    }
    Ok((out, EmbedTrace { active }))
}

/// Sparse gradient of the tables given the gradient of the `n × d` output.
pub fn embed_backward(trace: &EmbedTrace, upstream: &Tensor) -> Result<EmbeddingGrad> {
    if upstream.rows() != trace.active.len() {
        return Err(Error::Internal(format!(
            "embedding trace has {} fields, upstream gradient has {} rows",
            trace.active.len(),
            upstream.rows()
        )));
    }
    let mut rows = Vec::new();
    for (field, active) in trace.active.iter().enumerate() {
        let g = upstream.row(field);
        for &(r, w) in active {
            rows.push((field, r, g.iter().map(|v| w * v).collect()));
        }
    }
    Ok(EmbeddingGrad { rows })
}

//! Named, partition-tagged trainable parameters.
//!
//! Every trainable tensor lives in a [`ParamStore`] under a unique
//! hierarchical name and carries a partition tag: sentence-level weights
//! (the plain transformer) or document-level weights (context encoder,
//! context attention, gates, and their norms). The two-step trainer keys
//! freezing and optimizer state off these tags.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which training step owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    /// Plain transformer weights, estimated on sentence pairs.
    Sentence,
    /// Context-conditioning weights, estimated on document data.
    Document,
}

impl Partition {
    pub fn tag(self) -> u8 {
        match self {
            Partition::Sentence => 0,
            Partition::Document => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Partition::Sentence),
            1 => Ok(Partition::Document),
            other => Err(Error::Data(format!("unknown partition tag {other}"))),
        }
    }
}

/// Stable handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Param<F: Scalar> {
    name: String,
    partition: Partition,
    value: Tensor<F>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Scalar> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, partition: Partition, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            partition,
            value,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn partition(&self, id: ParamId) -> Partition {
        self.params[id.0].partition
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let cur = &self.params[id.0];
        if cur.value.shape() != value.shape() {
            return Err(Error::Dim {
                op: "param set",
                lhs: cur.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.params[id.0].value = value;
        Ok(())
    }

    /// Ids belonging to one partition, in creation order.
    pub fn partition_ids(&self, partition: Partition) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.partition(id) == partition)
            .collect()
    }

    /// Total scalar count in one partition.
    pub fn partition_numel(&self, partition: Partition) -> usize {
        self.partition_ids(partition)
            .iter()
            .map(|&id| self.value(id).numel())
            .sum()
    }
}

/// Uniform init with the fan-scaled limit sqrt(6 / (fan_in + fan_out)).
pub fn fan_scaled_uniform<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<F> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<F> = (0..rows * cols)
        .map(|_| F::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape/data agree")
}

/// Embedding rows drawn uniform with variance 1/dim.
pub fn embedding_uniform<F: Scalar>(rng: &mut ChaCha8Rng, vocab: usize, dim: usize) -> Tensor<F> {
    let limit = (3.0 / dim as f64).sqrt();
    let data: Vec<F> = (0..vocab * dim)
        .map(|_| F::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(vec![vocab, dim], data).expect("shape/data agree")
}

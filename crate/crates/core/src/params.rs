//! Named parameter blocks shared by the models, the optimizer and checkpoints.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamBlock<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub frozen: bool,
}

/// Ordered collection of parameter blocks. Block order is fixed at model
/// construction and is the order used by checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    blocks: Vec<ParamBlock<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { blocks: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.blocks.iter().all(|b| b.name != name),
            "duplicate parameter name {name}"
        );
        self.blocks.push(ParamBlock {
            name,
            value: Arc::new(value),
            frozen: false,
        });
        ParamId(self.blocks.len() - 1)
    }

    pub fn add_uniform<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut R) -> ParamId {
        self.add(name, Tensor::uniform(shape, INIT_SCALE, rng))
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.blocks.len()).map(ParamId)
    }

    pub fn blocks(&self) -> &[ParamBlock<T>] {
        &self.blocks
    }

    pub fn block(&self, id: ParamId) -> &ParamBlock<T> {
        &self.blocks[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.blocks[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.blocks[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let block = &mut self.blocks[id.0];
        if block.value.shape() != value.shape() {
            return Err(Error::shape("set_param", block.value.shape(), value.shape()));
        }
        block.value = Arc::new(value);
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.blocks.iter().position(|b| b.name == name).map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.blocks[id.0].frozen = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.blocks[id.0].frozen
    }

    pub fn total_size(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    pub fn zero(&mut self, id: ParamId) {
        let t = self.get_mut(id);
        t.data_mut().iter_mut().for_each(|x| *x = T::zero());
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock {
                    name: b.name.clone(),
                    value: Arc::new(b.value.cast()),
                    frozen: b.frozen,
                })
                .collect(),
        }
    }
}

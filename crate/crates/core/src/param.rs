use ndarray::ArrayD;

use crate::Scalar;

/// A named learnable (or frozen) tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<S> {
    pub name: String,
    pub values: ArrayD<S>,
    /// Frozen tensors are stored and checkpointed but never updated.
    pub trainable: bool,
}

impl<S: Scalar> ParamTensor<S> {
    pub fn new(name: impl Into<String>, values: ArrayD<S>, trainable: bool) -> Self {
        Self {
            name: name.into(),
            values: values.as_standard_layout().into_owned(),
            trainable,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn zeros_like(&self) -> ArrayD<S> {
        ArrayD::zeros(self.values.raw_dim())
    }
}

/// Anything that owns an ordered list of parameter tensors.
///
/// The order returned by `tensors` is the declaration order used by
/// gradients, the optimizer and checkpoints.
pub trait Parameterized<S: Scalar> {
    fn tensors(&self) -> Vec<&ParamTensor<S>>;
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor<S>>;

    fn num_trainable(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|t| t.trainable)
            .map(|t| t.len())
            .sum()
    }
}

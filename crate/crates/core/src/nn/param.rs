use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trainable tensor with its gradient and freeze flag.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    frozen: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Parameter {
            name: name.into(),
            value,
            grad: None,
            frozen: false,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    /// Replaces the value. Shape must not change.
    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape(&self.name, self.value.shape(), value.shape()));
        }
        self.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn set_grad(&mut self, grad: Tensor<T>) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::shape(
                format!("{} grad", self.name),
                self.value.shape(),
                grad.shape(),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        if frozen {
            self.grad = None;
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{leaky_relu, sigmoid, Tensor2};
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    LeakyRelu,
    Sigmoid,
    Softmax,
}

/// Fully connected layer `act(x · Wᵀ + b)` with `W` stored out x in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor2,
    pub bias: Tensor2,
    pub activation: Activation,
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundDense {
    pub weight: Var,
    pub bias: Var,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Tensor2, bias: Tensor2, activation: Activation) -> Result<Self, NumericsError> {
        if bias.shape() != (1, weight.rows()) {
            return Err(NumericsError::Dimension(format!(
                "bias {:?} does not match weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights in ±√(6/(fan_in+fan_out)), zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            weight: Tensor2::new(outputs, inputs, data).expect("shape matches by construction"),
            bias: Tensor2::zeros(1, outputs),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2, NumericsError> {
        let z = x.matmul_t(&self.weight)?.add_row(&self.bias)?;
        Ok(match self.activation {
            Activation::Identity => z,
            Activation::LeakyRelu => z.map(leaky_relu),
            Activation::Sigmoid => z.map(sigmoid),
            Activation::Softmax => z.softmax_rows(),
        })
    }

    /// Registers weight and bias as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundDense {
        BoundDense {
            weight: tape.param(self.weight.clone()),
            bias: tape.param(self.bias.clone()),
            activation: self.activation,
        }
    }

    pub fn params_mut(&mut self) -> [&mut Tensor2; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Tensor2; 2] {
        [&self.weight, &self.bias]
    }
}

impl BoundDense {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
        let z = tape.matmul_t(x, self.weight)?;
        let z = tape.add_row(z, self.bias)?;
        match self.activation {
            Activation::Identity => Ok(z),
            Activation::LeakyRelu => tape.leaky_relu(z),
            Activation::Sigmoid => tape.sigmoid(z),
            Activation::Softmax => tape.softmax_rows(z),
        }
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable array. Frozen parameters never receive updates.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub frozen: bool,
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    XavierUniform { fan_in: usize, fan_out: usize },
    /// Normal-ish (uniform with matching variance) scaled for ReLU, `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Uniform(f64),
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: None,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn init(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let mut t = Tensor::zeros(shape);
        let bound = match init {
            Init::Zeros => None,
            Init::Ones => {
                t.data_mut().fill(1.0);
                None
            }
            Init::XavierUniform { fan_in, fan_out } => {
                Some((6.0 / (fan_in + fan_out).max(1) as f64).sqrt())
            }
            // uniform(-b, b) has variance b²/3
            Init::He { fan_in } => Some((6.0 / fan_in.max(1) as f64).sqrt()),
            Init::Uniform(b) => Some(b),
        };
        if let Some(b) = bound {
            for v in t.data_mut() {
                *v = rng.gen_range(-b..=b);
            }
        }
        self.add(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in &mut self.params {
            p.frozen = frozen;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        if p.frozen {
            return;
        }
        match &mut p.grad {
            Some(t) => t.add_assign(g),
            None => {
                let mut t = Tensor::zeros(p.value.shape().to_vec());
                t.add_assign(g);
                p.grad = Some(t);
            }
        }
    }

    /// Digest over every parameter value, in registration order.
    pub fn checksum(&self) -> u64 {
        self.params.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, p| {
            (h ^ p.value.checksum()).wrapping_mul(0x0100_0000_01b3)
        })
    }

    /// `(name, value)` pairs, used for checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrite values by name. Every parameter in the store must be present
    /// with a matching shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| TensorError::UnknownParam(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_named",
                    left: p.value.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Standard deviation of initialized weights.
pub const INIT_STD: f64 = 0.02;
/// Cut-off of the underlying normal, in units of its own sigma.
const TRUNCATION: f64 = 2.0;

/// Sigma of the underlying normal whose ±2σ truncation has std [`INIT_STD`].
fn underlying_sigma() -> f64 {
    let a = TRUNCATION;
    let pdf = libm::exp(-0.5 * a * a) / libm::sqrt(2.0 * core::f64::consts::PI);
    let mass = libm::erf(a / core::f64::consts::SQRT_2);
    INIT_STD / libm::sqrt(1.0 - 2.0 * a * pdf / mass)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Learnable and subject to weight decay (conv and linear weights).
    Weight,
    /// Learnable, excluded from weight decay (biases, norm scale/shift).
    NoDecay,
    /// Not learnable; carried in checkpoints (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamInit {
    TruncatedNormal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub role: ParamRole,
    pub init: ParamInit,
}

impl<T> Param<T> {
    pub fn trainable(&self) -> bool {
        self.role != ParamRole::Buffer
    }

    pub fn decays(&self) -> bool {
        self.role == ParamRole::Weight
    }
}

/// Ordered, uniquely named store of parameters and buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry<T> {
    entries: Vec<Param<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> ParamRegistry<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: BTreeMap::new() }
    }

    /// Registers a zero (or, for [`ParamInit::Ones`], one) tensor. Random
    /// values are drawn by [`ParamRegistry::init`].
    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], role: ParamRole, init: ParamInit) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Parameter(format!("duplicate parameter name `{name}`")));
        }
        let value = match init {
            ParamInit::Ones => Tensor::from_vec(shape, alloc::vec![T::one(); shape.iter().product()])?,
            _ => Tensor::from_vec(shape, alloc::vec![T::zero(); shape.iter().product()])?,
        };
        let grad = Tensor::zeros(shape);
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Param { name, value, grad, role, init });
        Ok(ParamId(id))
    }

    /// Re-initializes every entry: truncated normal for weights (cut at ±2σ
    /// of the underlying normal, realized std 0.02), zeros/ones otherwise. One ChaCha stream is consumed in
    /// registration order, so the result depends only on `seed` and the
    /// ordered names and shapes.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = underlying_sigma();
        for p in &mut self.entries {
            match p.init {
                ParamInit::Zeros => p.value.fill(T::zero()),
                ParamInit::Ones => p.value.fill(T::one()),
                ParamInit::TruncatedNormal => {
                    for v in p.value.data_mut() {
                        let z = loop {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            if z.abs() <= TRUNCATION {
                                break z;
                            }
                        };
                        *v = T::of_f64(z * sigma);
                    }
                }
            }
            p.grad.fill(T::zero());
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter().filter(|p| p.trainable())
    }

    /// Total element count of learnable tensors.
    pub fn num_trainable_elements(&self) -> usize {
        self.trainable().map(|p| p.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        self.entries[id.0].grad.add_assign(grad)
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|p| p.grad.fill(T::zero()));
    }

    /// Converts every value to another element type, keeping names and order.
    pub fn cast<U: Real>(&self) -> ParamRegistry<U> {
        ParamRegistry {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    role: p.role,
                    init: p.init,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut reg = ParamRegistry::<f32>::new();
        reg.register("a.weight", &[2], ParamRole::Weight, ParamInit::TruncatedNormal).unwrap();
        assert!(reg.register("a.weight", &[2], ParamRole::Weight, ParamInit::TruncatedNormal).is_err());
    }

    #[test]
    fn init_is_deterministic_and_truncated() {
        let build = |seed| {
            let mut reg = ParamRegistry::<f64>::new();
            reg.register("w", &[512, 512], ParamRole::Weight, ParamInit::TruncatedNormal).unwrap();
            reg.register("g", &[7], ParamRole::NoDecay, ParamInit::Ones).unwrap();
            reg.init(seed);
            reg
        };
        let (a, b) = (build(3), build(3));
        assert_eq!(a.value(ParamId(0)), b.value(ParamId(0)));
        assert_ne!(a.value(ParamId(0)), build(4).value(ParamId(0)));
        assert!(a.value(ParamId(1)).data().iter().all(|&v| v == 1.0));

        let w = a.value(ParamId(0)).data();
        let bound = 2.0 * underlying_sigma();
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(w.iter().any(|v| v.abs() > 0.9 * bound));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std - INIT_STD).abs() <= 0.1 * INIT_STD, "std {std}");
    }
}

use crate::error::{Error, Result};
use crate::{Rng, Scalar, Tensor};

/// Named, ordered parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetWeights<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> NetWeights<T> {
    pub(crate) fn empty() -> Self {
        NetWeights {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Shape("parameter names and tensors differ in count".into()));
        }
        Ok(NetWeights { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Shape("parameter names differ".into()));
        }
        for (n, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "parameter {n}: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> NetWeights<U> {
        NetWeights {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub(crate) fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Re-draws every parameter from a unit-variance normal scaled by `std`
    /// (including layers that are normally zero-initialised).
    pub fn randomize(&mut self, rng: &mut Rng, std: f64) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = T::c(rng.normal() * std);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Normal with variance `1 / fan_in`.
    Fan(usize),
    Normal(f64),
}

pub(crate) struct ParamBuilder<'a, T> {
    pub weights: &'a mut NetWeights<T>,
    pub rng: &'a mut Rng,
}

impl<T: Scalar> ParamBuilder<'_, T> {
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Fan(fan_in) => self.rng.normal_vec(n, T::c(1.0 / (fan_in.max(1) as f64).sqrt())),
            Init::Normal(std) => self.rng.normal_vec(n, T::c(std)),
        };
        self.weights
            .push(name.to_string(), Tensor::new(shape.to_vec(), data).expect("consistent shape"))
    }
}

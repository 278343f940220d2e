use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`. Every tensor in the crate is one of these.
pub type Tensor2 = Array2<f64>;

/// Handle to one named tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat registry of every trainable tensor owned by a model.
///
/// Layers keep [`ParamId`]s rather than tensors, which lets the optimizer,
/// the gradient checker and the checkpoint writer treat any model uniformly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor2>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Registers a `rows × cols` tensor drawn uniformly from ±√(6/(rows+cols)).
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        self.add(name, xavier_uniform(rows, cols, rng))
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor2)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            tensors: self.values.iter().map(|t| Tensor2::zeros(t.raw_dim())).collect(),
        }
    }

    /// Replaces all values with those of `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::dim("ParamStore::copy_from", "identical layout", "different layout"));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.dim() != src.dim() {
                return Err(Error::dim("ParamStore::copy_from", format!("{:?}", dst.dim()), format!("{:?}", src.dim())));
            }
            dst.assign(src);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Tensor2] {
        &mut self.values
    }

    pub(crate) fn from_parts(names: Vec<String>, values: Vec<Tensor2>) -> Self {
        Self { names, values }
    }
}

/// Gradient accumulators mirroring a [`ParamStore`] layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    tensors: Vec<Tensor2>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.tensors[id.0]
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub(crate) fn tensors(&self) -> &[Tensor2] {
        &self.tensors
    }
}

/// Uniform initialization in ±√(6/(fan_in+fan_out)).
pub fn xavier_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor2 {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

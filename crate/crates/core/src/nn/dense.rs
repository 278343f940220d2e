use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamId, ParamStore, Tensor2};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

/// Stack of affine layers `y = act(x·W + b)`; `W` is `in × out`, `b` is `1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    layers: Vec<DenseLayer>,
}

/// Per-layer activations recorded by [`DenseNet::forward_cached`].
#[derive(Clone, Debug)]
pub struct DenseCache {
    /// `outputs[0]` is the network input; `outputs[i+1]` is the output of layer `i`.
    outputs: Vec<Tensor2>,
}

impl DenseCache {
    pub fn output(&self) -> &Tensor2 {
        self.outputs.last().expect("cache always holds the input")
    }
}

impl DenseNet {
    /// Builds a net with `sizes.len() - 1` layers, registering parameters under `prefix`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        sizes: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "a dense net needs at least one layer");
        assert_eq!(activations.len(), sizes.len() - 1, "one activation per layer");
        let layers = sizes
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(i, (w, &activation))| DenseLayer {
                weight: store.add_uniform(format!("{prefix}.{i}.weight"), w[0], w[1], rng),
                bias: store.add(format!("{prefix}.{i}.bias"), Tensor2::zeros((1, w[1]))),
                activation,
            })
            .collect();
        Self {
            sizes: sizes.to_vec(),
            layers,
        }
    }

    /// Re-attaches a net to parameters already present in `store` (checkpoint loading).
    pub fn attach(store: &ParamStore, prefix: &str, activations: &[Activation]) -> Result<Self> {
        let mut sizes = Vec::new();
        let mut layers = Vec::new();
        for (i, &activation) in activations.iter().enumerate() {
            let find = |suffix: &str| {
                store
                    .find(&format!("{prefix}.{i}.{suffix}"))
                    .ok_or_else(|| Error::Lookup(format!("missing parameter {prefix}.{i}.{suffix}")))
            };
            let weight = find("weight")?;
            let bias = find("bias")?;
            let (rows, cols) = store.get(weight).dim();
            if store.get(bias).dim() != (1, cols) {
                return Err(Error::dim("DenseNet::attach", format!("(1, {cols})"), format!("{:?}", store.get(bias).dim())));
            }
            if let Some(&prev) = sizes.last() {
                if prev != rows {
                    return Err(Error::dim("DenseNet::attach", prev, rows));
                }
            } else {
                sizes.push(rows);
            }
            sizes.push(cols);
            layers.push(DenseLayer { weight, bias, activation });
        }
        if layers.is_empty() {
            return Err(Error::Lookup(format!("no layers for {prefix}")));
        }
        Ok(Self { sizes, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor2) -> Result<Tensor2> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = Self::layer_forward(store, layer, &h);
        }
        Ok(h)
    }

    pub fn forward_cached(&self, store: &ParamStore, x: &Tensor2) -> Result<DenseCache> {
        self.check_input(x)?;
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x.clone());
        for layer in &self.layers {
            let next = Self::layer_forward(store, layer, outputs.last().unwrap());
            outputs.push(next);
        }
        Ok(DenseCache { outputs })
    }

    /// Accumulates parameter gradients into `grads` and returns dL/dx.
    pub fn backward(&self, store: &ParamStore, cache: &DenseCache, grad_out: &Tensor2, grads: &mut Grads) -> Tensor2 {
        let mut delta = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.outputs[i];
            let output = &cache.outputs[i + 1];
            ndarray::Zip::from(&mut delta)
                .and(output)
                .for_each(|d, &y| *d *= layer.activation.derivative_from_output(y));
            *grads.get_mut(layer.weight) += &input.t().dot(&delta);
            *grads.get_mut(layer.bias) += &delta.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
            delta = delta.dot(&store.get(layer.weight).t());
        }
        delta
    }

    fn layer_forward(store: &ParamStore, layer: &DenseLayer, x: &Tensor2) -> Tensor2 {
        let mut z = x.dot(store.get(layer.weight));
        z += store.get(layer.bias);
        z.mapv_inplace(|v| layer.activation.apply(v));
        z
    }

    fn check_input(&self, x: &Tensor2) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim("dense_forward", format!("{} input columns", self.input_dim()), x.ncols()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_oracle(store: &ParamStore, net: &DenseNet, x: &Tensor2) -> Tensor2 {
        let mut rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
        for layer in net.layers() {
            let w = store.get(layer.weight);
            let b = store.get(layer.bias);
            rows = rows
                .iter()
                .map(|r| {
                    (0..w.ncols())
                        .map(|j| {
                            let mut s = b[[0, j]];
                            for (i, xi) in r.iter().enumerate() {
                                s += xi * w[[i, j]];
                            }
                            match layer.activation {
                                Activation::Relu => s.max(0.0),
                                Activation::Tanh => s.tanh(),
                                Activation::Identity => s,
                            }
                        })
                        .collect()
                })
                .collect();
        }
        let cols = rows[0].len();
        Tensor2::from_shape_vec((rows.len(), cols), rows.concat()).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = DenseNet::new(&mut store, "id", &[3, 3], &[Activation::Identity], &mut rng);
        *store.get_mut(net.layers()[0].weight) = Tensor2::eye(3);
        let x = array![[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]];
        assert_eq!(net.forward(&store, &x).unwrap(), x);
    }

    #[test]
    fn relu_clamps_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = DenseNet::new(&mut store, "r", &[1, 1], &[Activation::Relu], &mut rng);
        *store.get_mut(net.layers()[0].weight) = array![[-1.0]];
        assert_eq!(net.forward(&store, &array![[2.0]]).unwrap(), array![[0.0]]);
    }

    #[test]
    fn two_layer_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let net = DenseNet::new(&mut store, "n", &[4, 5, 3], &[Activation::Tanh, Activation::Identity], &mut rng);
        for l in net.layers() {
            *store.get_mut(l.bias) = super::super::params::xavier_uniform(1, store.get(l.bias).ncols(), &mut rng);
        }
        let x = super::super::params::xavier_uniform(6, 4, &mut rng);
        let got = net.forward(&store, &x).unwrap();
        let want = scalar_oracle(&store, &net, &x);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = DenseNet::new(&mut store, "n", &[4, 2], &[Activation::Tanh], &mut rng);
        let err = net.forward(&store, &Tensor2::zeros((1, 3))).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let net = DenseNet::new(&mut store, "n", &[3, 8, 2], &[Activation::Relu, Activation::Tanh], &mut rng);
        let x = super::super::params::xavier_uniform(5, 3, &mut rng);
        let a = net.forward(&store, &x).unwrap();
        let b = net.forward(&store, &x).unwrap();
        assert_eq!(a.as_slice().unwrap(), b.as_slice().unwrap());
    }

    #[test]
    fn attach_recovers_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let net = DenseNet::new(&mut store, "n", &[3, 8, 2], &[Activation::Relu, Activation::Tanh], &mut rng);
        let again = DenseNet::attach(&store, "n", &net.activations()).unwrap();
        assert_eq!(net, again);
    }
}

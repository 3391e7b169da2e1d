//! Parameter storage and the layer primitives shared by the toy and
//! pretrained backbones.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, NodeId};

/// Negative slope used by every leaky-ReLU in the toy networks.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Ordered, named collection of parameter tensors.
///
/// Iteration order is insertion order, which makes parameter binding,
/// optimizer state and checkpoint layout deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter name: {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.entries.iter_mut()
    }

    /// Insert every parameter into the graph, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ParamBinding {
        let mut ids = IndexMap::new();
        for (name, value) in &self.entries {
            let id = if trainable {
                g.param(value.clone())
            } else {
                g.input(value.clone())
            };
            ids.insert(name.clone(), id);
        }
        ParamBinding { ids }
    }
}

/// Graph node ids for one [`ParamStore`] bound into a [`Graph`].
pub struct ParamBinding {
    ids: IndexMap<String, NodeId>,
}

impl ParamBinding {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter: {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, NodeId)> {
        self.ids.iter().map(|(k, &v)| (k, v))
    }
}

/// He-initialized convolution weight of shape (out, in, k, k).
pub fn he_conv_weight(out_c: usize, in_c: usize, k: usize, rng: &mut impl Rng) -> ArrayD<f64> {
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    let normal = StandardNormal;
    ArrayD::from_shape_fn(IxDyn(&[out_c, in_c, k, k]), |_| {
        let z: f64 = normal.sample(rng);
        z * std
    })
}

/// Non-affine instance normalization: per sample and channel, subtract the
/// spatial mean and divide by the spatial standard deviation.
pub fn instance_norm(g: &mut Graph, x: NodeId, eps: f64) -> NodeId {
    let shape = g.value(x).shape().to_vec();
    debug_assert_eq!(shape.len(), 4);
    let hw = (shape[2] * shape[3]) as f64;
    let sum = g.sum_axes(x, &[2, 3]);
    let mean = g.scale(sum, 1.0 / hw);
    let dev = g.sub(x, mean);
    let dev_sq = g.square(dev);
    let var_sum = g.sum_axes(dev_sq, &[2, 3]);
    let var = g.scale(var_sum, 1.0 / hw);
    let var_eps = g.affine(var, 1.0, eps);
    let std = g.sqrt(var_eps);
    g.div(dev, std)
}

/// conv3x3 -> instance norm -> leaky ReLU, the standard toy stage.
pub fn conv_in_act(g: &mut Graph, x: NodeId, w: NodeId, stride: usize) -> NodeId {
    let y = g.conv2d(x, w, stride, 1);
    let y = instance_norm(g, y, 1e-5);
    g.leaky_relu(y, LEAKY_SLOPE)
}

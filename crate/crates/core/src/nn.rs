//! Named parameter storage and the layer building blocks.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Graph, PaddingMode, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors. Insertion order is the
/// canonical order for checkpoints and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.by_name.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Allocates parameters under a dotted name prefix.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Child builder whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> Builder<'_, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, value)
    }

    /// Fan-in scaled uniform initialization on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    /// Keeps activations bounded through the residual dense stacks, where
    /// He-normal scaling compounds across blocks.
    pub fn fan_in_uniform(&mut self, name: &str, shape: crate::tensor::Shape, fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as Real).sqrt();
        let t = Tensor::rand_uniform(shape, -bound, bound, self.rng);
        self.param(name, t)
    }
}

/// Convolution layer parameters plus its geometry.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub mode: PaddingMode,
}

impl Conv2d {
    /// `k x k` convolution with "same" padding at stride 1.
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Self::with_stride(b, name, cin, cout, k, 1, k / 2)
    }

    pub fn with_stride<R: Rng>(
        b: &mut Builder<R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        let weight = s.fan_in_uniform("weight", [cout, cin, k, k], cin * k * k)?;
        let bias = Some(s.param("bias", Tensor::zeros([1, cout, 1, 1]))?);
        Ok(Conv2d {
            weight,
            bias,
            stride,
            pad,
            mode: PaddingMode::Zero,
        })
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad, self.mode)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng>(
        b: &mut Builder<R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        // each output pixel receives about (k/stride)^2 taps per input channel
        let fan_in = (cin * k * k / (stride * stride)).max(1);
        let weight = s.fan_in_uniform("weight", [cin, cout, k, k], fan_in)?;
        let bias = Some(s.param("bias", Tensor::zeros([1, cout, 1, 1]))?);
        Ok(ConvTranspose2d {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

/// Per-channel learnable PReLU.
#[derive(Clone, Debug)]
pub struct PRelu {
    pub alpha: ParamId,
}

pub const PRELU_INIT: Real = 0.25;

impl PRelu {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, channels: usize) -> Result<Self> {
        let alpha = b.param(name, Tensor::full([1, channels, 1, 1], PRELU_INIT))?;
        Ok(PRelu { alpha })
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        g.prelu(x, g.param(self.alpha))
    }
}

/// Residual dense block: densely connected 3x3 convs (each sees the block
/// input and every earlier conv output), a 1x1 local fusion back to the
/// input width, and a local residual.
#[derive(Clone, Debug)]
pub struct Rdb {
    convs: Vec<(Conv2d, PRelu)>,
    fusion: Conv2d,
}

impl Rdb {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, channels: usize, layers: usize, growth: usize) -> Result<Self> {
        let mut s = b.scope(name);
        let mut convs = Vec::with_capacity(layers);
        for i in 0..layers {
            let cin = channels + i * growth;
            let conv = Conv2d::new(&mut s, &format!("conv{i}"), cin, growth, 3)?;
            let act = PRelu::new(&mut s, &format!("prelu{i}"), growth)?;
            convs.push((conv, act));
        }
        let fusion = Conv2d::new(&mut s, "fusion", channels + layers * growth, channels, 1)?;
        Ok(Rdb { convs, fusion })
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let mut feats = vec![x];
        for (conv, act) in &self.convs {
            let input = if feats.len() == 1 { x } else { g.concat(&feats, 1)? };
            let y = act.forward(g, conv.forward(g, input)?)?;
            feats.push(y);
        }
        let fused = self.fusion.forward(g, g.concat(&feats, 1)?)?;
        g.add(fused, x)
    }
}

/// Channel attention: global average pool, 1x1 squeeze, ReLU, 1x1 expand,
/// sigmoid gate multiplied per channel.
#[derive(Clone, Debug)]
pub struct CaLayer {
    squeeze: Conv2d,
    expand: Conv2d,
}

pub const CA_REDUCTION: usize = 4;

impl CaLayer {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, channels: usize) -> Result<Self> {
        let mut s = b.scope(name);
        let mid = (channels / CA_REDUCTION).max(1);
        Ok(CaLayer {
            squeeze: Conv2d::new(&mut s, "squeeze", channels, mid, 1)?,
            expand: Conv2d::new(&mut s, "expand", mid, channels, 1)?,
        })
    }

    /// Per-channel gates in `(0, 1)`, shape `N x C x 1 x 1`.
    pub fn gates(&self, g: &Graph, x: Var) -> Result<Var> {
        let pooled = g.mean_hw(x);
        let mid = g.relu(self.squeeze.forward(g, pooled)?);
        Ok(g.sigmoid(self.expand.forward(g, mid)?))
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let gates = self.gates(g, x)?;
        g.mul(x, gates)
    }
}

/// `x + conv(relu(conv(x)))` with 3x3 convs.
#[derive(Clone, Debug)]
pub struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlock {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, channels: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(ResBlock {
            c1: Conv2d::new(&mut s, "conv1", channels, channels, 3)?,
            c2: Conv2d::new(&mut s, "conv2", channels, channels, 3)?,
        })
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let y = g.relu(self.c1.forward(g, x)?);
        let y = self.c2.forward(g, y)?;
        g.add(x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::default();
        store.add("a", Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert!(store.add("a", Tensor::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn scoped_names_and_shapes() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        let mut s = b.scope("net");
        let rdb = Rdb::new(&mut s, "rdb0", 8, 4, 16).unwrap();
        assert_eq!(rdb.convs.len(), 4);
        let id = store.find("net.rdb0.conv3.weight").unwrap();
        assert_eq!(store.value(id).shape(), [16, 8 + 3 * 16, 3, 3]);
        let fusion = store.find("net.rdb0.fusion.weight").unwrap();
        assert_eq!(store.value(fusion).shape(), [8, 8 + 4 * 16, 1, 1]);
        let alpha = store.find("net.rdb0.prelu0").unwrap();
        assert!(store.value(alpha).data().iter().all(|&a| a == PRELU_INIT));
    }

    #[test]
    fn rdb_preserves_shape_and_zero_input() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rdb = Rdb::new(&mut Builder::new(&mut store, &mut rng), "rdb", 4, 4, 16).unwrap();
        let g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros([1, 4, 5, 6]));
        let y = rdb.forward(&g, x).unwrap();
        assert_eq!(g.shape(y), [1, 4, 5, 6]);
        // biases start at zero, so a zero input stays zero
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_gates_in_open_unit_interval() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ca = CaLayer::new(&mut Builder::new(&mut store, &mut rng), "ca", 8).unwrap();
        let g = Graph::with_params(&store);
        let x = g.constant(Tensor::randn([2, 8, 4, 4], 3.0, &mut rng));
        let gates = g.value(ca.gates(&g, x).unwrap());
        assert!(gates.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

//! Learnable layers and parameter bookkeeping.

use crate::array::NdArray;
use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

/// Dense affine layer; weights are [out, in], bias [out].
///
/// Initialization is uniform in [-1/sqrt(in), 1/sqrt(in)] from the seeded
/// generator, so a given seed always produces the same parameters.
#[derive(Debug, Clone)]
pub struct LinearLayer<S: Scalar = f32> {
    pub weight: NdArray<S>,
    pub bias: NdArray<S>,
}

impl<S: Scalar> LinearLayer<S> {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = NdArray::from_vec(
            vec![out_dim, in_dim],
            (0..out_dim * in_dim).map(|_| S::from_f64(rng.range(-bound, bound))).collect(),
        )
        .expect("init weight shape");
        let bias = NdArray::from_vec(
            vec![out_dim],
            (0..out_dim).map(|_| S::from_f64(rng.range(-bound, bound))).collect(),
        )
        .expect("init bias shape");
        LinearLayer { weight, bias }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearLayer {
            weight: NdArray::zeros(vec![out_dim, in_dim]),
            bias: NdArray::zeros(vec![out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// 3x3 convolution parameters; weights [out, in, 3, 3], bias [out].
#[derive(Debug, Clone)]
pub struct ConvLayer<S: Scalar = f32> {
    pub weight: NdArray<S>,
    pub bias: NdArray<S>,
}

impl<S: Scalar> ConvLayer<S> {
    pub fn init(in_ch: usize, out_ch: usize, rng: &mut Rng) -> Self {
        let fan_in = in_ch * 9;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = NdArray::from_vec(
            vec![out_ch, in_ch, 3, 3],
            (0..out_ch * in_ch * 9).map(|_| S::from_f64(rng.range(-bound, bound))).collect(),
        )
        .expect("init conv weight");
        let bias = NdArray::from_vec(
            vec![out_ch],
            (0..out_ch).map(|_| S::from_f64(rng.range(-bound, bound))).collect(),
        )
        .expect("init conv bias");
        ConvLayer { weight, bias }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Tape bindings of named parameter arrays for one forward/backward cycle.
///
/// Layers live as plain arrays between steps; `bind_*` registers them as
/// leaves on the current tape and remembers the node ids, so the optimizer
/// can pull gradients back out by name after `backward`.
pub struct Binder<'t, S: Scalar> {
    tape: &'t Tape<S>,
    entries: Vec<(String, NodeId)>,
}

/// Node ids of one bound affine layer.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl<'t, S: Scalar> Binder<'t, S> {
    pub fn new(tape: &'t Tape<S>) -> Self {
        Binder { tape, entries: Vec::new() }
    }

    pub fn bind(&mut self, name: &str, value: &NdArray<S>) -> NodeId {
        let id = self.tape.leaf(value.clone());
        self.entries.push((name.to_string(), id));
        id
    }

    pub fn bind_linear(&mut self, name: &str, layer: &LinearLayer<S>) -> BoundLayer {
        BoundLayer {
            weight: self.bind(&format!("{name}.w"), &layer.weight),
            bias: self.bind(&format!("{name}.b"), &layer.bias),
        }
    }

    pub fn bind_conv(&mut self, name: &str, layer: &ConvLayer<S>) -> BoundLayer {
        BoundLayer {
            weight: self.bind(&format!("{name}.w"), &layer.weight),
            bias: self.bind(&format!("{name}.b"), &layer.bias),
        }
    }

    pub fn entries(&self) -> &[(String, NodeId)] {
        &self.entries
    }

    /// Gradient of every bound parameter, in binding order.
    pub fn gradients(&self) -> Vec<(String, NdArray<S>)> {
        self.entries
            .iter()
            .map(|(name, id)| (name.clone(), self.tape.grad(*id)))
            .collect()
    }
}

/// Two-layer perceptron applied per pixel (1x1 convolutions with a SiLU
/// between). The workhorse of the metric head: seed bins, attractors,
/// splitters, and probability parameters are all predicted this way.
#[derive(Debug, Clone)]
pub struct Mlp<S: Scalar = f32> {
    pub fc1: LinearLayer<S>,
    pub fc2: LinearLayer<S>,
}

impl<S: Scalar> Mlp<S> {
    pub fn init(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Mlp {
            fc1: LinearLayer::init(in_dim, hidden, rng),
            fc2: LinearLayer::init(hidden, out_dim, rng),
        }
    }

    /// Random first layer, zeroed output layer; squashed outputs then sit at
    /// the midpoint of their range.
    pub fn init_zero_out(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Mlp {
            fc1: LinearLayer::init(in_dim, hidden, rng),
            fc2: LinearLayer::zeros(hidden, out_dim),
        }
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t, S>, name: &str) -> BoundMlp {
        BoundMlp {
            fc1: binder.bind_linear(&format!("{name}.fc1"), &self.fc1),
            fc2: binder.bind_linear(&format!("{name}.fc2"), &self.fc2),
        }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &NdArray<S>)) {
        f(&format!("{name}.fc1.w"), &self.fc1.weight);
        f(&format!("{name}.fc1.b"), &self.fc1.bias);
        f(&format!("{name}.fc2.w"), &self.fc2.weight);
        f(&format!("{name}.fc2.b"), &self.fc2.bias);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut NdArray<S>)) {
        f(&format!("{name}.fc1.w"), &mut self.fc1.weight);
        f(&format!("{name}.fc1.b"), &mut self.fc1.bias);
        f(&format!("{name}.fc2.w"), &mut self.fc2.weight);
        f(&format!("{name}.fc2.b"), &mut self.fc2.bias);
    }

    pub fn cast<T: Scalar>(&self) -> Mlp<T> {
        Mlp {
            fc1: LinearLayer { weight: self.fc1.weight.cast(), bias: self.fc1.bias.cast() },
            fc2: LinearLayer { weight: self.fc2.weight.cast(), bias: self.fc2.bias.cast() },
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMlp {
    pub fc1: BoundLayer,
    pub fc2: BoundLayer,
}

/// Applies a bound MLP per pixel on [C, h, w].
pub fn pointwise_mlp<S: Scalar>(tape: &Tape<S>, x: NodeId, mlp: BoundMlp) -> Result<NodeId> {
    let h = tape.pointwise_linear(x, mlp.fc1.weight, mlp.fc1.bias)?;
    let h = tape.silu(h);
    tape.pointwise_linear(h, mlp.fc2.weight, mlp.fc2.bias)
}

/// Named parameter collection that can be enumerated for optimization and
/// serialization. `visit` and `visit_mut` must enumerate the same names in
/// the same order as the struct's `bind` method.
pub trait ParamSet<S: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &NdArray<S>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut NdArray<S>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, arr| n += arr.len());
        n
    }
}

/// Plain SGD with a fixed step: `p -= lr * grad` for every named gradient.
/// Parameters without a gradient entry (e.g. heads not routed to this step)
/// stay untouched.
pub fn apply_sgd<S: Scalar>(
    params: &mut dyn ParamSet<S>,
    grads: &[(String, NdArray<S>)],
    lr: f64,
) {
    use std::collections::BTreeMap;
    let by_name: BTreeMap<&str, &NdArray<S>> =
        grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
    let step = S::from_f64(-lr);
    params.visit_mut(&mut |name, arr| {
        if let Some(g) = by_name.get(name) {
            arr.add_scaled(g, step);
        }
    });
}

/// Plain stochastic gradient descent settings.
#[derive(Debug, Clone)]
pub struct SgdOpts {
    pub steps: usize,
    pub step_size: f64,
    pub batch: usize,
    pub seed: u64,
}

/// Applies a bound affine layer over the trailing axis.
pub fn linear_map<S: Scalar>(tape: &Tape<S>, x: NodeId, layer: BoundLayer) -> Result<NodeId> {
    tape.linear(x, layer.weight, layer.bias)
}

/// Applies a bound affine layer per pixel over the channel axis of [C, h, w].
pub fn pointwise_map<S: Scalar>(tape: &Tape<S>, x: NodeId, layer: BoundLayer) -> Result<NodeId> {
    tape.pointwise_linear(x, layer.weight, layer.bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let mut r1 = Rng::new(11);
        let mut r2 = Rng::new(11);
        let a: LinearLayer<f32> = LinearLayer::init(16, 8, &mut r1);
        let b: LinearLayer<f32> = LinearLayer::init(16, 8, &mut r2);
        assert_eq!(a.weight.data(), b.weight.data());
        let bound = 1.0 / 4.0;
        assert!(a.weight.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn identity_linear_map() {
        let tape: Tape<f64> = Tape::new();
        let mut binder = Binder::new(&tape);
        let layer = LinearLayer {
            weight: NdArray::from_vec(vec![2, 2], vec![1., 0., 0., 1.]).unwrap(),
            bias: NdArray::zeros(vec![2]),
        };
        let bound = binder.bind_linear("id", &layer);
        let x = tape.leaf(NdArray::from_vec(vec![2], vec![1., 0.]).unwrap());
        let y = linear_map(&tape, x, bound).unwrap();
        assert_eq!(tape.value_clone(y).data(), &[1., 0.]);
    }

    #[test]
    fn scalar_affine_linear_map() {
        let tape: Tape<f64> = Tape::new();
        let mut binder = Binder::new(&tape);
        let layer = LinearLayer {
            weight: NdArray::from_vec(vec![1, 1], vec![3.]).unwrap(),
            bias: NdArray::from_vec(vec![1], vec![1.]).unwrap(),
        };
        let bound = binder.bind_linear("s", &layer);
        let x = tape.leaf(NdArray::from_vec(vec![1], vec![2.]).unwrap());
        let y = linear_map(&tape, x, bound).unwrap();
        assert_eq!(tape.value_clone(y).data(), &[7.]);
    }

    #[test]
    fn linear_map_rejects_bad_trailing_extent() {
        let tape: Tape<f64> = Tape::new();
        let mut binder = Binder::new(&tape);
        let layer = LinearLayer::<f64>::zeros(3, 2);
        let bound = binder.bind_linear("l", &layer);
        let x = tape.leaf(NdArray::zeros(vec![4]));
        assert!(linear_map(&tape, x, bound).is_err());
    }
}

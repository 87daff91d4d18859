//! Routing of inputs to per-domain metric heads: labeled (supervised at both
//! ends), trained (supervised classifier, label-free inference), and auto
//! (label-free throughout, trained via soft blending).

use crate::array::NdArray;
use crate::error::{Error, Result};
use crate::losses::router_ce;
use crate::nn::{Binder, BoundLayer, LinearLayer};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainLabel {
    Indoor,
    Outdoor,
}

impl DomainLabel {
    pub fn index(self) -> usize {
        match self {
            DomainLabel::Indoor => 0,
            DomainLabel::Outdoor => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DomainLabel::Indoor => "indoor",
            DomainLabel::Outdoor => "outdoor",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "indoor" => Ok(DomainLabel::Indoor),
            "outdoor" => Ok(DomainLabel::Outdoor),
            other => Err(Error::Contract(format!("unknown domain label '{other}'"))),
        }
    }
}

/// Simplex weights over heads plus the hard argmax choice
/// (lowest index wins ties).
#[derive(Debug, Clone)]
pub struct RouteDecision {
    pub head_weights: Vec<f64>,
    pub hard_choice: usize,
}

impl RouteDecision {
    pub fn from_weights(head_weights: Vec<f64>) -> Self {
        let mut best = 0;
        for (i, &w) in head_weights.iter().enumerate() {
            if w > head_weights[best] {
                best = i;
            }
        }
        RouteDecision { head_weights, hard_choice: best }
    }

    pub fn one_hot(index: usize, num_heads: usize) -> Self {
        let mut head_weights = vec![0.0; num_heads];
        head_weights[index] = 1.0;
        RouteDecision { head_weights, hard_choice: index }
    }
}

/// Fixed label-to-head mapping: indoor -> head 0, outdoor -> head 1.
pub fn route_labeled(label: DomainLabel, num_heads: usize) -> Result<RouteDecision> {
    let idx = label.index();
    if idx >= num_heads {
        return Err(Error::Contract(format!(
            "label '{}' maps to head {idx}, but only {num_heads} heads exist",
            label.name()
        )));
    }
    Ok(RouteDecision::one_hot(idx, num_heads))
}

/// Classifier MLP over globally-pooled bottleneck features.
#[derive(Debug, Clone)]
pub struct RouterParams<S: Scalar = f32> {
    pub fc1: LinearLayer<S>,
    pub fc2: LinearLayer<S>,
}

impl<S: Scalar> RouterParams<S> {
    pub fn init(bottleneck_ch: usize, hidden: usize, num_heads: usize, rng: &mut Rng) -> Self {
        RouterParams {
            fc1: LinearLayer::init(bottleneck_ch, hidden, rng),
            fc2: LinearLayer::init(hidden, num_heads, rng),
        }
    }

    pub fn zeros(bottleneck_ch: usize, hidden: usize, num_heads: usize) -> Self {
        RouterParams {
            fc1: LinearLayer::zeros(bottleneck_ch, hidden),
            fc2: LinearLayer::zeros(hidden, num_heads),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.fc2.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t, S>) -> BoundRouter {
        BoundRouter {
            fc1: binder.bind_linear("router.fc1", &self.fc1),
            fc2: binder.bind_linear("router.fc2", &self.fc2),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundRouter {
    pub fc1: BoundLayer,
    pub fc2: BoundLayer,
}

/// Raw head logits from bottleneck features [C, h, w]. The pooled vector is
/// standardized across the feature axis before the MLP; backbone activations
/// arrive at arbitrary scale and the classifier should not have to relearn it.
pub fn router_logits<S: Scalar>(
    tape: &Tape<S>,
    router: BoundRouter,
    bottleneck: NodeId,
) -> Result<NodeId> {
    let pooled = tape.spatial_mean(bottleneck)?;
    let c = tape.shape(pooled)[0];
    let mean = tape.mean_all(pooled);
    let ones = tape.leaf(NdArray::full(vec![c], S::ONE));
    let centered = tape.sub(pooled, tape.scalar_mul(ones, mean)?)?;
    let var = tape.mean_all(tape.mul(centered, centered)?);
    let std = tape.sqrt(tape.add_scalar(var, S::from_f64(1e-8)));
    let one = tape.leaf(NdArray::scalar(S::ONE));
    let inv = tape.div(one, std)?;
    let normalized = tape.scalar_mul(centered, inv)?;
    let h = tape.linear(normalized, router.fc1.weight, router.fc1.bias)?;
    let h = tape.silu(h);
    tape.linear(h, router.fc2.weight, router.fc2.bias)
}

fn decision_from_logits<S: Scalar>(logits: &NdArray<S>) -> RouteDecision {
    let vals: Vec<f64> = logits.data().iter().map(|v| v.to_f64()).collect();
    let mx = vals.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    RouteDecision::from_weights(exps.iter().map(|e| e / sum).collect())
}

/// Supervised router: softmax weights plus a cross-entropy loss node when a
/// label is supplied (training); inference uses the hard argmax.
pub fn route_trained<S: Scalar>(
    tape: &Tape<S>,
    router: BoundRouter,
    bottleneck: NodeId,
    label: Option<usize>,
) -> Result<(RouteDecision, Option<NodeId>)> {
    let logits = router_logits(tape, router, bottleneck)?;
    let decision = decision_from_logits(&tape.value_clone(logits));
    let ce = match label {
        Some(l) => Some(router_ce(tape, logits, l)?),
        None => None,
    };
    Ok((decision, ce))
}

/// Label-free router: returns the decision plus the differentiable softmax
/// weight node so training can blend head outputs and let gradients reach
/// the router without any labels.
pub fn route_auto<S: Scalar>(
    tape: &Tape<S>,
    router: BoundRouter,
    bottleneck: NodeId,
) -> Result<(RouteDecision, NodeId)> {
    let logits = router_logits(tape, router, bottleneck)?;
    let weights = tape.channel_softmax(logits)?;
    let decision = decision_from_logits(&tape.value_clone(logits));
    Ok((decision, weights))
}

//! Composition of the metric head: probability-weighted combination of bin
//! centers into metric depth, the full forward pass over the feature pyramid,
//! and the direct-regression baseline head.

use crate::array::NdArray;
use crate::backbone::PyramidNodes;
use crate::bins::{
    refine_pyramid_graph, splitter_refine_graph, AttractorBins, AttractorConfig,
    BoundAttractorBins, BoundSplitterBins, SplitterBins,
};
use crate::error::{Error, Result};
use crate::nn::{Binder, BoundLayer, BoundMlp, ConvLayer, Mlp, ParamSet};
use crate::prob::{binomial_head_graph, softmax_head_graph};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

/// Hidden width of the small per-pixel MLPs inside the head.
pub const HEAD_HIDDEN: usize = 16;
/// Hidden channels of the naive head's convolutional block.
pub const NAIVE_HIDDEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Attractor,
    Splitter,
    Naive,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "attractor" => Ok(HeadKind::Attractor),
            "splitter" => Ok(HeadKind::Splitter),
            "naive" => Ok(HeadKind::Naive),
            other => Err(Error::Config(format!("unknown head kind '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Attractor => "attractor",
            HeadKind::Splitter => "splitter",
            HeadKind::Naive => "naive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbHeadKind {
    Binomial,
    Softmax,
}

impl ProbHeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "binomial" => Ok(ProbHeadKind::Binomial),
            "softmax" => Ok(ProbHeadKind::Softmax),
            other => Err(Error::Config(format!("unknown probability head '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProbHeadKind::Binomial => "binomial",
            ProbHeadKind::Softmax => "softmax",
        }
    }
}

/// Eq.-style depth readout: per-pixel dot product of probabilities and
/// centers, both [N, h, w].
pub fn combine_graph<S: Scalar>(
    tape: &Tape<S>,
    probs: NodeId,
    centers: NodeId,
) -> Result<NodeId> {
    if tape.shape(probs) != tape.shape(centers) {
        return Err(Error::Dimension(format!(
            "combine: probs {:?} vs centers {:?}",
            tape.shape(probs),
            tape.shape(centers)
        )));
    }
    let weighted = tape.mul(probs, centers)?;
    tape.channel_sum(weighted)
}

#[derive(Debug, Clone)]
enum HeadVariant<S: Scalar> {
    Attractor { bins: AttractorBins<S>, prob: Mlp<S>, prob_kind: ProbHeadKind },
    Splitter { bins: SplitterBins<S>, prob: Mlp<S>, prob_kind: ProbHeadKind },
    Naive { conv1: ConvLayer<S>, conv2: ConvLayer<S> },
}

/// One per-domain metric head: bin machinery plus probability head, with its
/// own depth range.
#[derive(Debug, Clone)]
pub struct MetricHead<S: Scalar = f32> {
    pub domain: String,
    pub depth_range: (f64, f64),
    pub n_total: usize,
    pub attractor_cfg: AttractorConfig,
    variant: HeadVariant<S>,
}

impl<S: Scalar> MetricHead<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        domain: &str,
        depth_range: (f64, f64),
        kind: HeadKind,
        prob_kind: ProbHeadKind,
        n_total: usize,
        attractor_cfg: AttractorConfig,
        bottleneck_ch: usize,
        level_ch: &[usize; 4],
        rng: &mut Rng,
    ) -> Result<Self> {
        if !(depth_range.0 > 0.0 && depth_range.1 > depth_range.0) {
            return Err(Error::Config(format!(
                "head '{domain}': bad depth range {depth_range:?}"
            )));
        }
        if n_total < 2 {
            return Err(Error::Config(format!("head '{domain}': n_total must be >= 2")));
        }
        attractor_cfg.validate()?;
        let fine_ch = level_ch[3];
        let variant = match kind {
            HeadKind::Attractor => {
                let bins = AttractorBins::init(
                    bottleneck_ch,
                    level_ch,
                    n_total,
                    HEAD_HIDDEN,
                    &attractor_cfg.counts,
                    rng,
                );
                let prob = prob_mlp(prob_kind, fine_ch, n_total, rng);
                HeadVariant::Attractor { bins, prob, prob_kind }
            }
            HeadKind::Splitter => {
                let bins = SplitterBins::init(bottleneck_ch, level_ch, HEAD_HIDDEN, rng);
                let prob = prob_mlp(prob_kind, fine_ch, bins.total_bins(), rng);
                HeadVariant::Splitter { bins, prob, prob_kind }
            }
            HeadKind::Naive => HeadVariant::Naive {
                conv1: ConvLayer::init(fine_ch, NAIVE_HIDDEN, rng),
                conv2: zeroed_conv(NAIVE_HIDDEN, 1),
            },
        };
        Ok(MetricHead {
            domain: domain.to_string(),
            depth_range,
            n_total: match &variant {
                HeadVariant::Splitter { bins, .. } => bins.total_bins(),
                _ => n_total,
            },
            attractor_cfg,
            variant,
        })
    }

    pub fn kind(&self) -> HeadKind {
        match &self.variant {
            HeadVariant::Attractor { .. } => HeadKind::Attractor,
            HeadVariant::Splitter { .. } => HeadKind::Splitter,
            HeadVariant::Naive { .. } => HeadKind::Naive,
        }
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t, S>) -> BoundMetricHead {
        let name = format!("head.{}", self.domain);
        match &self.variant {
            HeadVariant::Attractor { bins, prob, prob_kind } => BoundMetricHead::Attractor {
                bins: bins.bind(binder, &format!("{name}.bins")),
                prob: prob.bind(binder, &format!("{name}.prob")),
                prob_kind: *prob_kind,
            },
            HeadVariant::Splitter { bins, prob, prob_kind } => BoundMetricHead::Splitter {
                bins: bins.bind(binder, &format!("{name}.bins")),
                prob: prob.bind(binder, &format!("{name}.prob")),
                prob_kind: *prob_kind,
            },
            HeadVariant::Naive { conv1, conv2 } => BoundMetricHead::Naive {
                conv1: binder.bind_conv(&format!("{name}.conv1"), conv1),
                conv2: binder.bind_conv(&format!("{name}.conv2"), conv2),
            },
        }
    }

    pub fn cast<T: Scalar>(&self) -> MetricHead<T> {
        MetricHead {
            domain: self.domain.clone(),
            depth_range: self.depth_range,
            n_total: self.n_total,
            attractor_cfg: self.attractor_cfg.clone(),
            variant: match &self.variant {
                HeadVariant::Attractor { bins, prob, prob_kind } => HeadVariant::Attractor {
                    bins: bins.cast(),
                    prob: prob.cast(),
                    prob_kind: *prob_kind,
                },
                HeadVariant::Splitter { bins, prob, prob_kind } => HeadVariant::Splitter {
                    bins: bins.cast(),
                    prob: prob.cast(),
                    prob_kind: *prob_kind,
                },
                HeadVariant::Naive { conv1, conv2 } => HeadVariant::Naive {
                    conv1: ConvLayer { weight: conv1.weight.cast(), bias: conv1.bias.cast() },
                    conv2: ConvLayer { weight: conv2.weight.cast(), bias: conv2.bias.cast() },
                },
            },
        }
    }
}

fn prob_mlp<S: Scalar>(
    kind: ProbHeadKind,
    fine_ch: usize,
    n_total: usize,
    rng: &mut Rng,
) -> Mlp<S> {
    match kind {
        // +1 input channel for the stacked relative depth.
        ProbHeadKind::Binomial => Mlp::init(fine_ch + 1, HEAD_HIDDEN, 2, rng),
        ProbHeadKind::Softmax => Mlp::init(fine_ch, HEAD_HIDDEN, n_total, rng),
    }
}

fn zeroed_conv<S: Scalar>(in_ch: usize, out_ch: usize) -> ConvLayer<S> {
    ConvLayer {
        weight: NdArray::zeros(vec![out_ch, in_ch, 3, 3]),
        bias: NdArray::zeros(vec![out_ch]),
    }
}

impl<S: Scalar> ParamSet<S> for MetricHead<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, &NdArray<S>)) {
        let name = format!("head.{}", self.domain);
        match &self.variant {
            HeadVariant::Attractor { bins, prob, .. } => {
                bins.visit(&format!("{name}.bins"), f);
                prob.visit(&format!("{name}.prob"), f);
            }
            HeadVariant::Splitter { bins, prob, .. } => {
                bins.visit(&format!("{name}.bins"), f);
                prob.visit(&format!("{name}.prob"), f);
            }
            HeadVariant::Naive { conv1, conv2 } => {
                f(&format!("{name}.conv1.w"), &conv1.weight);
                f(&format!("{name}.conv1.b"), &conv1.bias);
                f(&format!("{name}.conv2.w"), &conv2.weight);
                f(&format!("{name}.conv2.b"), &conv2.bias);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut NdArray<S>)) {
        let name = format!("head.{}", self.domain);
        match &mut self.variant {
            HeadVariant::Attractor { bins, prob, .. } => {
                bins.visit_mut(&format!("{name}.bins"), f);
                prob.visit_mut(&format!("{name}.prob"), f);
            }
            HeadVariant::Splitter { bins, prob, .. } => {
                bins.visit_mut(&format!("{name}.bins"), f);
                prob.visit_mut(&format!("{name}.prob"), f);
            }
            HeadVariant::Naive { conv1, conv2 } => {
                f(&format!("{name}.conv1.w"), &mut conv1.weight);
                f(&format!("{name}.conv1.b"), &mut conv1.bias);
                f(&format!("{name}.conv2.w"), &mut conv2.weight);
                f(&format!("{name}.conv2.b"), &mut conv2.bias);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum BoundMetricHead {
    Attractor { bins: BoundAttractorBins, prob: BoundMlp, prob_kind: ProbHeadKind },
    Splitter { bins: BoundSplitterBins, prob: BoundMlp, prob_kind: ProbHeadKind },
    Naive { conv1: BoundLayer, conv2: BoundLayer },
}

/// Full head forward: bins -> probabilities -> combination, upsampled to the
/// full resolution given by `rel_full`'s extents. Output is a [H, W] node of
/// metric depths inside the head's range.
pub fn metric_head_forward<S: Scalar>(
    tape: &Tape<S>,
    pyramid: &PyramidNodes,
    rel_full: NodeId,
    head: &MetricHead<S>,
    bound: &BoundMetricHead,
) -> Result<NodeId> {
    let (d_min, d_max) = head.depth_range;
    let full = tape.shape(rel_full);
    let (full_h, full_w) = (full[0], full[1]);
    let fine = pyramid.levels[3];

    let depth_half = match bound {
        BoundMetricHead::Attractor { bins, prob, prob_kind } => {
            let centers = refine_pyramid_graph(
                tape,
                pyramid.bottleneck,
                pyramid,
                bins,
                &head.attractor_cfg,
                d_min,
                d_max,
            )?;
            let probs = match prob_kind {
                ProbHeadKind::Binomial => {
                    binomial_head_graph(tape, fine, rel_full, *prob, head.n_total)?
                }
                ProbHeadKind::Softmax => softmax_head_graph(tape, fine, *prob)?,
            };
            combine_graph(tape, probs, centers)?
        }
        BoundMetricHead::Splitter { bins, prob, prob_kind } => {
            let centers =
                splitter_refine_graph(tape, pyramid.bottleneck, pyramid, bins, d_min, d_max)?;
            let probs = match prob_kind {
                ProbHeadKind::Binomial => {
                    binomial_head_graph(tape, fine, rel_full, *prob, head.n_total)?
                }
                ProbHeadKind::Softmax => softmax_head_graph(tape, fine, *prob)?,
            };
            combine_graph(tape, probs, centers)?
        }
        BoundMetricHead::Naive { conv1, conv2 } => {
            let h = tape.silu(tape.conv2d(fine, conv1.weight, conv1.bias, 1)?);
            let z = tape.conv2d(h, conv2.weight, conv2.bias, 1)?;
            let z = tape.index0(z, 0)?;
            let squashed = tape.sigmoid(z);
            let scaled = tape.mul_scalar(squashed, S::from_f64(d_max - d_min));
            tape.add_scalar(scaled, S::from_f64(d_min))
        }
    };
    tape.resample_bilinear(depth_half, full_h, full_w)
}

/// Direct-regression baseline entry point (no relative-depth conditioning).
pub fn naive_head_forward<S: Scalar>(
    tape: &Tape<S>,
    pyramid: &PyramidNodes,
    head: &MetricHead<S>,
    bound: &BoundMetricHead,
) -> Result<NodeId> {
    if !matches!(bound, BoundMetricHead::Naive { .. }) {
        return Err(Error::Contract("naive_head_forward: head is not the naive variant".into()));
    }
    let fine_shape = tape.shape(pyramid.levels[3]);
    let dummy_rel = tape.leaf(NdArray::zeros(vec![fine_shape[1] * 2, fine_shape[2] * 2]));
    metric_head_forward(tape, pyramid, dummy_rel, head, bound)
}

//! Adaptive depth bins: seed prediction at the bottleneck, multi-scale
//! refinement by attractor layers, and the bin-splitting baseline.
//!
//! Attractors move every bin center toward predicted points on the depth
//! interval. The inverse law divides the pull by 1 + alpha*|a - c|^gamma;
//! the exponential law damps it by exp(-alpha*|a - c|^gamma). Both contract:
//! a single attractor strictly reduces |c - a| whenever c != a.

use crate::backbone::PyramidNodes;
use crate::error::{Error, Result};
use crate::nn::{pointwise_mlp, Binder, BoundMlp, Mlp};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttractorVariant {
    Inverse,
    Exponential,
}

impl AttractorVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "inverse" => Ok(AttractorVariant::Inverse),
            "exponential" => Ok(AttractorVariant::Exponential),
            other => Err(Error::Config(format!("unknown attractor variant '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttractorVariant::Inverse => "inverse",
            AttractorVariant::Exponential => "exponential",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttractorConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub variant: AttractorVariant,
    /// Attractor counts per decoder level, coarse to fine.
    pub counts: [usize; 4],
}

impl Default for AttractorConfig {
    fn default() -> Self {
        AttractorConfig {
            alpha: 300.0,
            gamma: 2.0,
            variant: AttractorVariant::Inverse,
            counts: [16, 8, 4, 1],
        }
    }
}

impl AttractorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("attractor.alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("attractor.gamma must be > 0, got {}", self.gamma)));
        }
        if self.counts.iter().any(|&c| c == 0) {
            return Err(Error::Config("attractor.counts must all be positive".into()));
        }
        Ok(())
    }
}

/// Bin centers from positive per-pixel widths that sum to 1:
/// center_k = d_min + (d_max - d_min) * (cumsum_k - w_k / 2).
/// Plain-number version used by tests as the construction oracle.
pub fn centers_from_widths(widths: &[f64], d_min: f64, d_max: f64) -> Vec<f64> {
    let range = d_max - d_min;
    let mut cum = 0.0;
    widths
        .iter()
        .map(|&w| {
            cum += w;
            d_min + range * (cum - w / 2.0)
        })
        .collect()
}

/// Graph version of the width-to-center construction for [N, h, w] widths.
pub fn centers_graph<S: Scalar>(
    tape: &Tape<S>,
    widths: NodeId,
    d_min: f64,
    d_max: f64,
) -> Result<NodeId> {
    let cum = tape.channel_cumsum(widths)?;
    let half = tape.mul_scalar(widths, S::from_f64(0.5));
    let inner = tape.sub(cum, half)?;
    let scaled = tape.mul_scalar(inner, S::from_f64(d_max - d_min));
    Ok(tape.add_scalar(scaled, S::from_f64(d_min)))
}

fn check_range(d_min: f64, d_max: f64) -> Result<()> {
    if !(d_min > 0.0 && d_max > d_min) {
        return Err(Error::Contract(format!(
            "depth range must satisfy 0 < d_min < d_max, got [{d_min}, {d_max}]"
        )));
    }
    Ok(())
}

/// Seed bins at the bottleneck: an MLP predicts N_total normalized widths per
/// pixel (softmax keeps them positive, summing to 1), turned into strictly
/// ascending centers inside (d_min, d_max).
pub fn seed_bins_graph<S: Scalar>(
    tape: &Tape<S>,
    bottleneck: NodeId,
    seed_mlp: BoundMlp,
    d_min: f64,
    d_max: f64,
) -> Result<NodeId> {
    check_range(d_min, d_max)?;
    let logits = pointwise_mlp(tape, bottleneck, seed_mlp)?;
    if tape.shape(logits)[0] < 2 {
        return Err(Error::Contract("seed_bins: needs at least 2 bins".into()));
    }
    let widths = tape.channel_softmax(logits)?;
    centers_graph(tape, widths, d_min, d_max)
}

/// Attractor points from level features, squashed into [d_min, d_max]
/// (sigmoid of the MLP output; zero output lands at the range midpoint).
pub fn predict_attractors_graph<S: Scalar>(
    tape: &Tape<S>,
    level_features: NodeId,
    mlp: BoundMlp,
    d_min: f64,
    d_max: f64,
) -> Result<NodeId> {
    check_range(d_min, d_max)?;
    let raw = pointwise_mlp(tape, level_features, mlp)?;
    if tape.shape(raw)[0] < 1 {
        return Err(Error::Contract("predict_attractors: needs n_a >= 1".into()));
    }
    let s = tape.sigmoid(raw);
    let scaled = tape.mul_scalar(s, S::from_f64(d_max - d_min));
    Ok(tape.add_scalar(scaled, S::from_f64(d_min)))
}

/// One attractor adjustment: c' = clamp(c + sum_k pull(a_k - c)).
pub fn attract_graph<S: Scalar>(
    tape: &Tape<S>,
    centers: NodeId,
    attractors: NodeId,
    variant: AttractorVariant,
    alpha: f64,
    gamma: f64,
    d_min: f64,
    d_max: f64,
) -> Result<NodeId> {
    if !(alpha > 0.0 && gamma > 0.0) {
        return Err(Error::Contract(format!(
            "attractor strength must be positive, got alpha={alpha}, gamma={gamma}"
        )));
    }
    let c_shape = tape.shape(centers);
    let a_shape = tape.shape(attractors);
    if c_shape[1..] != a_shape[1..] {
        return Err(Error::Dimension(format!(
            "attract: centers {c_shape:?} and attractors {a_shape:?} disagree spatially"
        )));
    }
    let n_total = c_shape[0];
    let n_a = a_shape[0];
    let mut delta: Option<NodeId> = None;
    for k in 0..n_a {
        let a_k = tape.index0(attractors, k)?;
        let a_b = tape.broadcast0(a_k, n_total);
        let diff = tape.sub(a_b, centers)?;
        let dist = tape.abs_pow(diff, gamma);
        let term = match variant {
            AttractorVariant::Inverse => {
                let den = tape.add_scalar(tape.mul_scalar(dist, S::from_f64(alpha)), S::ONE);
                tape.div(diff, den)?
            }
            AttractorVariant::Exponential => {
                let damp = tape.exp(tape.mul_scalar(dist, S::from_f64(-alpha)));
                tape.mul(diff, damp)?
            }
        };
        delta = Some(match delta {
            None => term,
            Some(d) => tape.add(d, term)?,
        });
    }
    let adjusted = tape.add(centers, delta.expect("n_a >= 1"))?;
    Ok(tape.clamp(adjusted, d_min, d_max))
}

/// Splits each bin into two children that share the parent width according to
/// a per-bin fraction in (0,1); per-pixel width sums are preserved.
pub fn split_bins_graph<S: Scalar>(
    tape: &Tape<S>,
    widths: NodeId,
    fractions: NodeId,
) -> Result<NodeId> {
    let first = tape.mul(widths, fractions)?;
    let second = tape.sub(widths, first)?;
    tape.interleave0(first, second)
}

/// Attractor-path parameters: the seed MLP plus one attractor MLP per level.
#[derive(Debug, Clone)]
pub struct AttractorBins<S: Scalar = f32> {
    pub seed: Mlp<S>,
    pub levels: Vec<Mlp<S>>,
}

impl<S: Scalar> AttractorBins<S> {
    pub fn init(
        bottleneck_ch: usize,
        level_ch: &[usize; 4],
        n_total: usize,
        hidden: usize,
        counts: &[usize; 4],
        rng: &mut Rng,
    ) -> Self {
        AttractorBins {
            seed: Mlp::init(bottleneck_ch, hidden, n_total, rng),
            levels: level_ch
                .iter()
                .zip(counts)
                .map(|(&c, &n_a)| Mlp::init(c, hidden, n_a, rng))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.seed.param_count() + self.levels.iter().map(Mlp::param_count).sum::<usize>()
    }
}

#[derive(Debug, Clone)]
pub struct BoundAttractorBins {
    pub seed: BoundMlp,
    pub levels: Vec<BoundMlp>,
}

impl<S: Scalar> AttractorBins<S> {
    pub fn bind<'t>(&self, binder: &mut Binder<'t, S>, name: &str) -> BoundAttractorBins {
        BoundAttractorBins {
            seed: self.seed.bind(binder, &format!("{name}.seed")),
            levels: self
                .levels
                .iter()
                .enumerate()
                .map(|(i, m)| m.bind(binder, &format!("{name}.attr{i}")))
                .collect(),
        }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &crate::array::NdArray<S>)) {
        self.seed.visit(&format!("{name}.seed"), f);
        for (i, m) in self.levels.iter().enumerate() {
            m.visit(&format!("{name}.attr{i}"), f);
        }
    }

    pub fn visit_mut(
        &mut self,
        name: &str,
        f: &mut dyn FnMut(&str, &mut crate::array::NdArray<S>),
    ) {
        self.seed.visit_mut(&format!("{name}.seed"), f);
        for (i, m) in self.levels.iter_mut().enumerate() {
            m.visit_mut(&format!("{name}.attr{i}"), f);
        }
    }

    pub fn cast<T: Scalar>(&self) -> AttractorBins<T> {
        AttractorBins {
            seed: self.seed.cast(),
            levels: self.levels.iter().map(Mlp::cast).collect(),
        }
    }
}

/// Seed centers refined across the four decoder levels: upsample to the level
/// grid, predict that level's attractors, pull. Output sits at 1/2 scale.
pub fn refine_pyramid_graph<S: Scalar>(
    tape: &Tape<S>,
    bottleneck: NodeId,
    pyramid: &PyramidNodes,
    bins: &BoundAttractorBins,
    cfg: &AttractorConfig,
    d_min: f64,
    d_max: f64,
) -> Result<NodeId> {
    cfg.validate().map_err(|e| Error::Contract(e.to_string()))?;
    if bins.levels.len() != pyramid.levels.len() {
        return Err(Error::Contract(format!(
            "refine_pyramid: {} attractor MLPs for {} levels",
            bins.levels.len(),
            pyramid.levels.len()
        )));
    }
    let mut centers = seed_bins_graph(tape, bottleneck, bins.seed, d_min, d_max)?;
    for (lvl, mlp) in pyramid.levels.iter().zip(&bins.levels) {
        let shape = tape.shape(*lvl);
        centers = tape.resample_bilinear(centers, shape[1], shape[2])?;
        let attractors = predict_attractors_graph(tape, *lvl, *mlp, d_min, d_max)?;
        centers = attract_graph(
            tape, centers, attractors, cfg.variant, cfg.alpha, cfg.gamma, d_min, d_max,
        )?;
    }
    Ok(centers)
}

/// Splitter-path parameters (LocalBins-style baseline): seed widths at the
/// bottleneck, then one splitter MLP per level doubles the bin count.
#[derive(Debug, Clone)]
pub struct SplitterBins<S: Scalar = f32> {
    pub seed: Mlp<S>,
    pub splits: Vec<Mlp<S>>,
    pub n_seed: usize,
}

pub const SPLITTER_SEED_BINS: usize = 16;

impl<S: Scalar> SplitterBins<S> {
    pub fn init(
        bottleneck_ch: usize,
        level_ch: &[usize; 4],
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        let n_seed = SPLITTER_SEED_BINS;
        SplitterBins {
            seed: Mlp::init(bottleneck_ch, hidden, n_seed, rng),
            splits: level_ch
                .iter()
                .enumerate()
                .map(|(l, &c)| Mlp::init(c, hidden, n_seed << l, rng))
                .collect(),
            n_seed,
        }
    }

    /// Bin count after all levels: n_seed * 2^levels.
    pub fn total_bins(&self) -> usize {
        self.n_seed << self.splits.len()
    }

    pub fn param_count(&self) -> usize {
        self.seed.param_count() + self.splits.iter().map(Mlp::param_count).sum::<usize>()
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t, S>, name: &str) -> BoundSplitterBins {
        BoundSplitterBins {
            seed: self.seed.bind(binder, &format!("{name}.seed")),
            splits: self
                .splits
                .iter()
                .enumerate()
                .map(|(i, m)| m.bind(binder, &format!("{name}.split{i}")))
                .collect(),
        }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &crate::array::NdArray<S>)) {
        self.seed.visit(&format!("{name}.seed"), f);
        for (i, m) in self.splits.iter().enumerate() {
            m.visit(&format!("{name}.split{i}"), f);
        }
    }

    pub fn visit_mut(
        &mut self,
        name: &str,
        f: &mut dyn FnMut(&str, &mut crate::array::NdArray<S>),
    ) {
        self.seed.visit_mut(&format!("{name}.seed"), f);
        for (i, m) in self.splits.iter_mut().enumerate() {
            m.visit_mut(&format!("{name}.split{i}"), f);
        }
    }

    pub fn cast<T: Scalar>(&self) -> SplitterBins<T> {
        SplitterBins {
            seed: self.seed.cast(),
            splits: self.splits.iter().map(Mlp::cast).collect(),
            n_seed: self.n_seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundSplitterBins {
    pub seed: BoundMlp,
    pub splits: Vec<BoundMlp>,
}

/// Splitter refinement: widths double at every level under the conservation
/// constraint; centers are constructed from the final widths at 1/2 scale.
pub fn splitter_refine_graph<S: Scalar>(
    tape: &Tape<S>,
    bottleneck: NodeId,
    pyramid: &PyramidNodes,
    bins: &BoundSplitterBins,
    d_min: f64,
    d_max: f64,
) -> Result<NodeId> {
    check_range(d_min, d_max)?;
    let logits = pointwise_mlp(tape, bottleneck, bins.seed)?;
    let mut widths = tape.channel_softmax(logits)?;
    for (lvl, mlp) in pyramid.levels.iter().zip(&bins.splits) {
        let shape = tape.shape(*lvl);
        widths = tape.resample_bilinear(widths, shape[1], shape[2])?;
        // Bilinear interpolation of sum-1 fields keeps the sum at 1 only up
        // to rounding; renormalize before splitting.
        let n = tape.shape(widths)[0];
        let total = tape.channel_sum(widths)?;
        widths = tape.div(widths, tape.broadcast0(total, n))?;
        let fractions = tape.sigmoid(pointwise_mlp(tape, *lvl, *mlp)?);
        widths = split_bins_graph(tape, widths, fractions)?;
    }
    centers_graph(tape, widths, d_min, d_max)
}

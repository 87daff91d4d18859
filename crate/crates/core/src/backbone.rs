//! Toy encoder-decoder standing in for the full relative-depth base model.
//!
//! A strided-convolution encoder reduces the input to 1/32 scale; a mirrored
//! decoder with skip connections walks back up to 1/2 scale. The bottleneck
//! and the four decoder levels form the feature pyramid consumed by the
//! metric head; a 1-channel projection of the finest level, upsampled to full
//! resolution, is the relative (scale/shift-ambiguous) depth output.

use crate::array::NdArray;
use crate::datagen::Sample;
use crate::depth::RelativeDepthMap;
use crate::error::{Error, Result};
use crate::losses::{ssi_loss, LossConfig};
use crate::nn::{apply_sgd, Binder, BoundLayer, ConvLayer, LinearLayer, ParamSet, SgdOpts};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Channel count at 1/32 scale; decoder levels halve from here with a
    /// floor of 8 so the finest levels keep usable capacity.
    pub bottleneck_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: crate::datagen::IN_CHANNELS,
            bottleneck_channels: 32,
        }
    }
}

impl BackboneConfig {
    /// Encoder stage outputs at scales 1/2, 1/4, 1/8, 1/16.
    pub fn encoder_channels(&self) -> [usize; 4] {
        let c = self.bottleneck_channels;
        [(c / 2).max(4), c, c * 3 / 2, c * 2]
    }

    /// Decoder level outputs at scales 1/16, 1/8, 1/4, 1/2.
    pub fn decoder_channels(&self) -> [usize; 4] {
        let c = self.bottleneck_channels;
        [(c / 2).max(8), (c / 4).max(8), (c / 8).max(8), (c / 16).max(8)]
    }
}

#[derive(Debug, Clone)]
pub struct BackboneParams<S: Scalar = f32> {
    pub config: BackboneConfig,
    enc: Vec<ConvLayer<S>>,
    dec: Vec<ConvLayer<S>>,
    rel: LinearLayer<S>,
}

impl<S: Scalar> BackboneParams<S> {
    pub fn init(config: BackboneConfig, rng: &mut Rng) -> Self {
        let ec = config.encoder_channels();
        let dc = config.decoder_channels();
        let c0 = config.bottleneck_channels;
        let enc_io = [
            (config.in_channels, ec[0]),
            (ec[0], ec[1]),
            (ec[1], ec[2]),
            (ec[2], ec[3]),
            (ec[3], c0),
        ];
        let dec_io = [
            (c0 + ec[3], dc[0]),
            (dc[0] + ec[2], dc[1]),
            (dc[1] + ec[1], dc[2]),
            (dc[2] + ec[0], dc[3]),
        ];
        BackboneParams {
            enc: enc_io.iter().map(|&(i, o)| ConvLayer::init(i, o, rng)).collect(),
            dec: dec_io.iter().map(|&(i, o)| ConvLayer::init(i, o, rng)).collect(),
            rel: LinearLayer::init(dc[3], 1, rng),
            config,
        }
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t, S>) -> BoundBackbone {
        BoundBackbone {
            enc: self
                .enc
                .iter()
                .enumerate()
                .map(|(i, l)| binder.bind_conv(&format!("backbone.enc{i}"), l))
                .collect(),
            dec: self
                .dec
                .iter()
                .enumerate()
                .map(|(i, l)| binder.bind_conv(&format!("backbone.dec{i}"), l))
                .collect(),
            rel: binder.bind_linear("backbone.rel", &self.rel),
        }
    }

    pub fn cast<T: Scalar>(&self) -> BackboneParams<T> {
        BackboneParams {
            config: self.config.clone(),
            enc: self
                .enc
                .iter()
                .map(|l| ConvLayer { weight: l.weight.cast(), bias: l.bias.cast() })
                .collect(),
            dec: self
                .dec
                .iter()
                .map(|l| ConvLayer { weight: l.weight.cast(), bias: l.bias.cast() })
                .collect(),
            rel: LinearLayer { weight: self.rel.weight.cast(), bias: self.rel.bias.cast() },
        }
    }
}

impl<S: Scalar> ParamSet<S> for BackboneParams<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, &NdArray<S>)) {
        for (i, l) in self.enc.iter().enumerate() {
            f(&format!("backbone.enc{i}.w"), &l.weight);
            f(&format!("backbone.enc{i}.b"), &l.bias);
        }
        for (i, l) in self.dec.iter().enumerate() {
            f(&format!("backbone.dec{i}.w"), &l.weight);
            f(&format!("backbone.dec{i}.b"), &l.bias);
        }
        f("backbone.rel.w", &self.rel.weight);
        f("backbone.rel.b", &self.rel.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut NdArray<S>)) {
        for (i, l) in self.enc.iter_mut().enumerate() {
            f(&format!("backbone.enc{i}.w"), &mut l.weight);
            f(&format!("backbone.enc{i}.b"), &mut l.bias);
        }
        for (i, l) in self.dec.iter_mut().enumerate() {
            f(&format!("backbone.dec{i}.w"), &mut l.weight);
            f(&format!("backbone.dec{i}.b"), &mut l.bias);
        }
        f("backbone.rel.w", &mut self.rel.weight);
        f("backbone.rel.b", &mut self.rel.bias);
    }
}

#[derive(Debug, Clone)]
pub struct BoundBackbone {
    enc: Vec<BoundLayer>,
    dec: Vec<BoundLayer>,
    rel: BoundLayer,
}

/// Tape handles of the five-level pyramid: bottleneck at 1/32, decoder levels
/// at 1/16, 1/8, 1/4, 1/2 (coarse to fine).
#[derive(Debug, Clone, Copy)]
pub struct PyramidNodes {
    pub bottleneck: NodeId,
    pub levels: [NodeId; 4],
}

/// Concrete pyramid values for inspection and persistence-free evaluation.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub bottleneck: NdArray<f32>,
    pub levels: [NdArray<f32>; 4],
}

/// Full forward pass on the tape. Returns the full-resolution relative map
/// node ([H, W]) and the pyramid handles.
pub fn backbone_forward<S: Scalar>(
    tape: &Tape<S>,
    bb: &BoundBackbone,
    image: NodeId,
    config: &BackboneConfig,
) -> Result<(NodeId, PyramidNodes)> {
    let shape = tape.shape(image);
    if shape.len() != 3 || shape[0] != config.in_channels {
        return Err(Error::Dimension(format!(
            "backbone input must be [{}, H, W], got {:?}",
            config.in_channels, shape
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!(
            "backbone input extents must be multiples of 32, got {h}x{w}"
        )));
    }

    let mut skips = Vec::with_capacity(4);
    let mut x = image;
    for (i, layer) in bb.enc.iter().enumerate() {
        x = tape.conv2d(x, layer.weight, layer.bias, 2)?;
        x = tape.silu(x);
        if i < 4 {
            skips.push(x);
        }
    }
    let bottleneck = x;

    let mut levels = [bottleneck; 4];
    let mut cur = bottleneck;
    for (i, layer) in bb.dec.iter().enumerate() {
        let skip = skips[3 - i];
        let sk_shape = tape.shape(skip);
        let up = tape.resample_bilinear(cur, sk_shape[1], sk_shape[2])?;
        let cat = tape.concat0(up, skip)?;
        cur = tape.silu(tape.conv2d(cat, layer.weight, layer.bias, 1)?);
        levels[i] = cur;
    }

    let rel_half = tape.pointwise_linear(cur, bb.rel.weight, bb.rel.bias)?;
    let rel_full = tape.resample_bilinear(rel_half, h, w)?;
    let rel = tape.index0(rel_full, 0)?;
    Ok((rel, PyramidNodes { bottleneck, levels }))
}

/// Convenience inference on concrete arrays (fresh tape, frozen parameters).
pub fn encode_decode(
    params: &BackboneParams<f32>,
    image: &NdArray<f32>,
) -> Result<(RelativeDepthMap, FeaturePyramid)> {
    let tape: Tape<f32> = Tape::new();
    let mut binder = Binder::new(&tape);
    let bb = params.bind(&mut binder);
    let img = tape.leaf(image.clone());
    let (rel, pyr) = backbone_forward(&tape, &bb, img, &params.config)?;
    let pyramid = FeaturePyramid {
        bottleneck: tape.value_clone(pyr.bottleneck),
        levels: [
            tape.value_clone(pyr.levels[0]),
            tape.value_clone(pyr.levels[1]),
            tape.value_clone(pyr.levels[2]),
            tape.value_clone(pyr.levels[3]),
        ],
    };
    Ok((RelativeDepthMap { values: tape.value_clone(rel) }, pyramid))
}

/// Stage-1 pre-training: fits the relative output to ground-truth depth under
/// the scale/shift-invariant loss. Returns the per-step loss trace.
pub fn pretrain_relative(
    params: &mut BackboneParams<f32>,
    samples: &[Sample],
    opts: &SgdOpts,
    loss_cfg: &LossConfig,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Contract("pretrain_relative: dataset is empty".into()));
    }
    let mut rng = Rng::new(opts.seed);
    let mut trace = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let tape: Tape<f32> = Tape::new();
        let mut binder = Binder::new(&tape);
        let bb = params.bind(&mut binder);
        let mut losses = Vec::with_capacity(opts.batch);
        for _ in 0..opts.batch.max(1) {
            let sample = &samples[rng.below(samples.len())];
            let img = tape.leaf(sample.image.clone());
            let (rel, _) = backbone_forward(&tape, &bb, img, &params.config)?;
            losses.push(ssi_loss(
                &tape,
                rel,
                &sample.depth.values,
                &sample.depth.valid,
                loss_cfg,
            )?);
        }
        let mut total = losses[0];
        for l in &losses[1..] {
            total = tape.add(total, *l)?;
        }
        let loss = tape.mul_scalar(total, 1.0 / losses.len() as f32);
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "pretraining diverged at step {step}: loss {value}"
            )));
        }
        trace.push(value);
        tape.backward(loss)?;
        apply_sgd(params, &binder.gradients(), opts.step_size);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_scene, IN_CHANNELS};
    use crate::router::DomainLabel;

    fn tiny_params(seed: u64) -> BackboneParams<f32> {
        let cfg = BackboneConfig { in_channels: IN_CHANNELS, bottleneck_channels: 8 };
        BackboneParams::init(cfg, &mut Rng::new(seed))
    }

    #[test]
    fn pyramid_extents_are_powers_of_two_fractions() {
        let params = tiny_params(1);
        let img = NdArray::zeros(vec![IN_CHANNELS, 64, 64]);
        let (rel, pyr) = encode_decode(&params, &img).unwrap();
        assert_eq!(rel.values.shape(), &[64, 64]);
        assert_eq!(&pyr.bottleneck.shape()[1..], &[2, 2]);
        let expect = [[4, 4], [8, 8], [16, 16], [32, 32]];
        for (lvl, exp) in pyr.levels.iter().zip(expect) {
            assert_eq!(&lvl.shape()[1..], &exp);
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let params = tiny_params(2);
        let sample = gen_scene(DomainLabel::Indoor, 5, 64, 64).unwrap();
        let (r1, p1) = encode_decode(&params, &sample.image).unwrap();
        let (r2, p2) = encode_decode(&params, &sample.image).unwrap();
        let bits = |a: &NdArray<f32>| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&r1.values), bits(&r2.values));
        assert_eq!(bits(&p1.bottleneck), bits(&p2.bottleneck));
    }

    #[test]
    fn outputs_stay_finite_on_random_input() {
        let params = tiny_params(3);
        let mut rng = Rng::new(9);
        let img = NdArray::from_vec(
            vec![IN_CHANNELS, 64, 64],
            (0..IN_CHANNELS * 64 * 64).map(|_| rng.range(-1.0, 1.0) as f32).collect(),
        )
        .unwrap();
        let (rel, pyr) = encode_decode(&params, &img).unwrap();
        assert!(rel.values.all_finite());
        assert!(pyr.bottleneck.all_finite());
        assert!(pyr.levels.iter().all(|l| l.all_finite()));
    }

    #[test]
    fn non_multiple_of_32_extent_is_rejected() {
        let params = tiny_params(4);
        let img = NdArray::zeros(vec![IN_CHANNELS, 60, 64]);
        assert!(encode_decode(&params, &img).is_err());
    }

    #[test]
    fn pretrain_rejects_empty_dataset() {
        let mut params = tiny_params(5);
        let opts = SgdOpts { steps: 1, step_size: 0.1, batch: 1, seed: 0 };
        assert!(pretrain_relative(&mut params, &[], &opts, &LossConfig::default()).is_err());
    }

    #[test]
    fn pretrain_is_seed_deterministic() {
        let sample = gen_scene(DomainLabel::Indoor, 11, 32, 32).unwrap();
        let run = |seed: u64| {
            let mut params = tiny_params(seed);
            let opts = SgdOpts { steps: 5, step_size: 0.05, batch: 1, seed: 99 };
            pretrain_relative(&mut params, &[sample.clone()], &opts, &LossConfig::default())
                .unwrap()
        };
        let a = run(7);
        let b = run(7);
        assert_eq!(a, b);
    }
}

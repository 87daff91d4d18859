//! Algebraic properties of the bin machinery: attractor contraction, the
//! multi-attractor pull bound, splitter width conservation, and the closed
//! form of pyramid refinement under controlled parameters.

use depthbins::array::NdArray;
use depthbins::backbone::PyramidNodes;
use depthbins::bins::{
    attract_graph, refine_pyramid_graph, split_bins_graph, AttractorBins, AttractorConfig,
    AttractorVariant,
};
use depthbins::nn::{Binder, LinearLayer, Mlp};
use depthbins::rng::Rng;
use depthbins::tape::Tape;
use proptest::prelude::*;

fn attract_scalar(c: f64, a: f64, variant: AttractorVariant, alpha: f64, gamma: f64) -> f64 {
    let tape: Tape<f64> = Tape::new();
    let cn = tape.leaf(NdArray::from_vec(vec![1, 1, 1], vec![c]).unwrap());
    let an = tape.leaf(NdArray::from_vec(vec![1, 1, 1], vec![a]).unwrap());
    let out = attract_graph(&tape, cn, an, variant, alpha, gamma, 0.01, 100.0).unwrap();
    let v = tape.value(out).data()[0];
    v
}

/// A single attractor strictly shrinks |c - a| whenever c != a, for both
/// pull laws, over ten thousand random draws. Draws are kept inside the
/// regime where the pull stays above the f64 resolution of c: with a strong
/// enough damping exponent the update rounds away entirely (c + tiny == c)
/// and strictness stops being representable, even though it holds in exact
/// arithmetic.
#[test]
fn single_attractor_contracts() {
    let mut rng = Rng::new(90);
    for variant in [AttractorVariant::Inverse, AttractorVariant::Exponential] {
        for _ in 0..10_000 {
            let (c, a, alpha, gamma) = loop {
                let c = rng.range(0.1, 99.0);
                let a = rng.range(0.1, 99.0);
                let alpha = rng.range(1e-3, 500.0);
                let gamma = rng.range(0.1, 4.0);
                let d = (c - a).abs();
                if d < 1e-9 {
                    continue;
                }
                let pull = match variant {
                    AttractorVariant::Inverse => d / (1.0 + alpha * d.powf(gamma)),
                    AttractorVariant::Exponential => d * (-alpha * d.powf(gamma)).exp(),
                };
                if pull >= c.abs().max(a.abs()) * 1e-12 {
                    break (c, a, alpha, gamma);
                }
            };
            let c2 = attract_scalar(c, a, variant, alpha, gamma);
            let before = (c - a).abs();
            let after = (c2 - a).abs();
            assert!(
                after < before,
                "{variant:?}: |c'-a|={after} !< |c-a|={before} (c={c}, a={a}, alpha={alpha}, gamma={gamma})"
            );
            // Closed forms of the surviving distance.
            let d = before;
            let expected = match variant {
                AttractorVariant::Inverse => {
                    d * alpha * d.powf(gamma) / (1.0 + alpha * d.powf(gamma))
                }
                AttractorVariant::Exponential => d * (1.0 - (-alpha * d.powf(gamma)).exp()),
            };
            assert!(
                (after - expected).abs() <= 1e-9 * expected.max(1.0),
                "{variant:?}: distance {after} vs closed form {expected}"
            );
        }
    }
}

/// The total adjustment is bounded by the sum of distances to the attractors.
#[test]
fn multi_attractor_pull_is_bounded() {
    let mut rng = Rng::new(91);
    for variant in [AttractorVariant::Inverse, AttractorVariant::Exponential] {
        for _ in 0..2_000 {
            let n_c = 1 + rng.below(6);
            let n_a = 1 + rng.below(8);
            let centers: Vec<f64> = (0..n_c).map(|_| rng.range(0.1, 99.0)).collect();
            let attractors: Vec<f64> = (0..n_a).map(|_| rng.range(0.1, 99.0)).collect();
            let alpha = rng.range(1e-3, 500.0);
            let gamma = rng.range(0.1, 4.0);
            let tape: Tape<f64> = Tape::new();
            let cn = tape.leaf(NdArray::from_vec(vec![n_c, 1, 1], centers.clone()).unwrap());
            let an = tape.leaf(NdArray::from_vec(vec![n_a, 1, 1], attractors.clone()).unwrap());
            // Disable clamping influence with a wide range so the bound is
            // tested on the raw adjustment.
            let out =
                attract_graph(&tape, cn, an, variant, alpha, gamma, 1e-6, 1e6).unwrap();
            let adjusted = tape.value_clone(out);
            for (i, (&c, &c2)) in centers.iter().zip(adjusted.data()).enumerate() {
                let bound: f64 = attractors.iter().map(|a| (a - c).abs()).sum();
                let delta = (c2 - c).abs();
                assert!(
                    delta <= bound + 1e-9,
                    "{variant:?} center {i}: |delta|={delta} exceeds {bound}"
                );
            }
        }
    }
}

proptest! {
    /// Splitting conserves per-pixel width sums within 1e-6.
    #[test]
    fn split_preserves_width_sums(
        raw in prop::collection::vec(0.05f64..1.0, 2..24),
        fracs in prop::collection::vec(0.01f64..0.99, 24),
    ) {
        let n = raw.len();
        let total: f64 = raw.iter().sum();
        let widths: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let tape: Tape<f64> = Tape::new();
        let w = tape.leaf(NdArray::from_vec(vec![n, 1, 1], widths).unwrap());
        let f = tape.leaf(NdArray::from_vec(vec![n, 1, 1], fracs[..n].to_vec()).unwrap());
        let children = split_bins_graph(&tape, w, f).unwrap();
        let v = tape.value_clone(children);
        prop_assert_eq!(v.len(), 2 * n);
        let sum: f64 = v.data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-6);
        prop_assert!(v.data().iter().all(|&c| c > 0.0));
    }
}

/// Splitter conservation holds in 32-bit arithmetic too.
#[test]
fn split_conservation_in_f32() {
    let mut rng = Rng::new(92);
    for _ in 0..500 {
        let n = 2 + rng.below(30);
        let raw: Vec<f32> = (0..n).map(|_| rng.range(0.05, 1.0) as f32).collect();
        let total: f32 = raw.iter().sum();
        let widths: Vec<f32> = raw.iter().map(|w| w / total).collect();
        let fracs: Vec<f32> = (0..n).map(|_| rng.range(0.01, 0.99) as f32).collect();
        let tape: Tape<f32> = Tape::new();
        let w = tape.leaf(NdArray::from_vec(vec![n, 1, 1], widths).unwrap());
        let f = tape.leaf(NdArray::from_vec(vec![n, 1, 1], fracs).unwrap());
        let children = split_bins_graph(&tape, w, f).unwrap();
        let sum: f32 = tape.value_clone(children).data().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6, "sum {sum}");
    }
}

fn constant_pyramid(tape: &Tape<f64>, ch: usize, fill: f64) -> PyramidNodes {
    let field = |hw: usize| tape.leaf(NdArray::full(vec![ch, hw, hw], fill));
    PyramidNodes {
        bottleneck: field(1),
        levels: [field(2), field(4), field(8), field(16)],
    }
}

/// With zero-output attractor MLPs every attractor sits at the range
/// midpoint, so refinement must match the closed-form midpoint pull applied
/// level by level to the seed centers.
#[test]
fn zero_attractor_mlps_match_midpoint_closed_form() {
    let mut rng = Rng::new(93);
    for variant in [AttractorVariant::Inverse, AttractorVariant::Exponential] {
        let cfg = AttractorConfig {
            alpha: 7.0,
            gamma: 2.0,
            variant,
            counts: [3, 2, 2, 1],
        };
        let (d_min, d_max) = (0.5, 10.0);
        let n_total = 6;
        let ch = 3;
        // Random seed MLP, zero-output attractor MLPs.
        let bins = AttractorBins::<f64> {
            seed: Mlp::init(ch, 8, n_total, &mut rng),
            levels: cfg
                .counts
                .iter()
                .map(|&n_a| Mlp {
                    fc1: LinearLayer::init(ch, 8, &mut rng),
                    fc2: LinearLayer::zeros(8, n_a),
                })
                .collect(),
        };
        let tape: Tape<f64> = Tape::new();
        let mut binder = Binder::new(&tape);
        let bound = bins.bind(&mut binder, "bins");
        // Constant features make every pixel identical, so bilinear
        // upsampling is exact and one closed-form trace per bin suffices.
        let pyramid = constant_pyramid(&tape, ch, 0.37);
        let refined =
            refine_pyramid_graph(&tape, pyramid.bottleneck, &pyramid, &bound, &cfg, d_min, d_max)
                .unwrap();

        // Oracle: seed centers from the seed MLP output, then per level
        // c += n_a * pull(mid - c), clamped.
        let seed_centers = {
            let seeds = depthbins::bins::seed_bins_graph(
                &tape,
                pyramid.bottleneck,
                bound.seed,
                d_min,
                d_max,
            )
            .unwrap();
            let v = tape.value_clone(seeds);
            (0..n_total).map(|k| v.data()[k]).collect::<Vec<f64>>()
        };
        let mid = 0.5 * (d_min + d_max);
        let mut expect = seed_centers;
        for &n_a in &cfg.counts {
            for c in &mut expect {
                let d = mid - *c;
                let pull = match variant {
                    AttractorVariant::Inverse => d / (1.0 + cfg.alpha * d.abs().powf(cfg.gamma)),
                    AttractorVariant::Exponential => {
                        d * (-cfg.alpha * d.abs().powf(cfg.gamma)).exp()
                    }
                };
                *c = (*c + n_a as f64 * pull).clamp(d_min, d_max);
            }
        }
        let got = tape.value_clone(refined);
        let (h, w) = (got.shape()[1], got.shape()[2]);
        for k in 0..n_total {
            for p in 0..h * w {
                let g = got.data()[k * h * w + p];
                assert!(
                    (g - expect[k]).abs() <= 1e-5,
                    "{variant:?} bin {k} pixel {p}: {g} vs {}",
                    expect[k]
                );
            }
        }
    }
}

/// Huge alpha freezes the dynamics: refinement returns the upsampled seed
/// centers unchanged.
#[test]
fn huge_alpha_keeps_seed_centers() {
    let mut rng = Rng::new(94);
    let cfg = AttractorConfig {
        alpha: 1e12,
        gamma: 1.0,
        variant: AttractorVariant::Inverse,
        counts: [1, 1, 1, 1],
    };
    let (d_min, d_max) = (0.5, 10.0);
    let ch = 3;
    let bins = AttractorBins::<f64>::init(ch, &[ch; 4], 5, 8, &cfg.counts, &mut rng);
    let tape: Tape<f64> = Tape::new();
    let mut binder = Binder::new(&tape);
    let bound = bins.bind(&mut binder, "bins");
    let pyramid = constant_pyramid(&tape, ch, -0.8);
    let refined =
        refine_pyramid_graph(&tape, pyramid.bottleneck, &pyramid, &bound, &cfg, d_min, d_max)
            .unwrap();
    let seeds = depthbins::bins::seed_bins_graph(
        &tape,
        pyramid.bottleneck,
        bound.seed,
        d_min,
        d_max,
    )
    .unwrap();
    let seed_vals = tape.value_clone(seeds);
    let got = tape.value_clone(refined);
    let hw = got.shape()[1] * got.shape()[2];
    for k in 0..5 {
        for p in 0..hw {
            assert!((got.data()[k * hw + p] - seed_vals.data()[k]).abs() <= 1e-6);
        }
    }
}

/// Random parameters keep every refined center inside the depth range.
#[test]
fn refined_centers_stay_in_range() {
    let mut rng = Rng::new(95);
    for trial in 0..10 {
        let cfg = AttractorConfig {
            alpha: rng.range(0.5, 300.0),
            gamma: rng.range(0.5, 3.0),
            variant: if trial % 2 == 0 {
                AttractorVariant::Inverse
            } else {
                AttractorVariant::Exponential
            },
            counts: [4, 3, 2, 1],
        };
        let (d_min, d_max) = (1.0, 80.0);
        let ch = 3;
        let bins = AttractorBins::<f64>::init(ch, &[ch; 4], 8, 8, &cfg.counts, &mut rng);
        let tape: Tape<f64> = Tape::new();
        let mut binder = Binder::new(&tape);
        let bound = bins.bind(&mut binder, "bins");
        let field = |hw: usize, rng: &mut Rng| {
            let data: Vec<f64> = (0..ch * hw * hw).map(|_| rng.range(-2.0, 2.0)).collect();
            NdArray::from_vec(vec![ch, hw, hw], data).unwrap()
        };
        let pyramid = PyramidNodes {
            bottleneck: tape.leaf(field(1, &mut rng)),
            levels: [
                tape.leaf(field(2, &mut rng)),
                tape.leaf(field(4, &mut rng)),
                tape.leaf(field(8, &mut rng)),
                tape.leaf(field(16, &mut rng)),
            ],
        };
        let refined =
            refine_pyramid_graph(&tape, pyramid.bottleneck, &pyramid, &bound, &cfg, d_min, d_max)
                .unwrap();
        for &c in tape.value_clone(refined).data() {
            assert!((d_min..=d_max).contains(&c), "center {c} escaped [{d_min}, {d_max}]");
        }
    }
}

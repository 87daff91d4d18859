//! Every differentiable primitive against central finite differences, 100
//! random configurations each, 64-bit mode. A random fixed readout makes the
//! root scalar while exposing per-coordinate routing mistakes that a plain
//! sum would hide.

use depthbins::array::NdArray;
use depthbins::gradcheck::grad_check;
use depthbins::prob::log_choose_table;
use depthbins::rng::Rng;
use depthbins::tape::{NodeId, Tape};
use depthbins::Result;

const CONFIGS: usize = 100;
const TOL: f64 = 1e-5;
const EPS: f64 = 1e-5;

type Builder = Box<dyn Fn(&Tape<f64>, NodeId) -> Result<NodeId>>;

fn rand_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.range(lo, hi)).collect()
}

/// Runs `make` CONFIGS times and reports the worst deviation.
fn worst_err<F>(seed: u64, make: F) -> f64
where
    F: Fn(&mut Rng) -> (NdArray<f64>, Builder),
{
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..CONFIGS {
        let (x, f) = make(&mut rng);
        let err = grad_check(|tape, leaf| f(tape, leaf), &x, EPS).expect("grad_check");
        worst = worst.max(err);
    }
    worst
}

/// Scalar readout: sum(y * C) with C fixed random coefficients.
fn readout(tape: &Tape<f64>, y: NodeId, coeffs: &[f64]) -> Result<NodeId> {
    let shape = tape.shape(y);
    let c = tape.leaf(NdArray::from_vec(shape, coeffs.to_vec())?);
    let w = tape.mul(y, c)?;
    Ok(tape.sum_all(w))
}

macro_rules! unary_check {
    ($name:ident, $lo:expr, $hi:expr, $apply:expr) => {
        #[test]
        fn $name() {
            let err = worst_err(line!() as u64, |rng| {
                let n = 2 + rng.below(8);
                let x = NdArray::from_vec(vec![n], rand_vec(rng, n, $lo, $hi)).unwrap();
                let coeffs = rand_vec(rng, n, -1.0, 1.0);
                let f: Builder = Box::new(move |tape, leaf| {
                    let y = $apply(tape, leaf);
                    readout(tape, y, &coeffs)
                });
                (x, f)
            });
            assert!(err <= TOL, "max rel err {err}");
        }
    };
}

unary_check!(exp_matches_fd, -2.0, 2.0, |t: &Tape<f64>, x| t.exp(x));
unary_check!(ln_matches_fd, 0.2, 5.0, |t: &Tape<f64>, x| t.ln(x));
unary_check!(sqrt_matches_fd, 0.2, 5.0, |t: &Tape<f64>, x| t.sqrt(x));
unary_check!(sigmoid_matches_fd, -4.0, 4.0, |t: &Tape<f64>, x| t.sigmoid(x));
unary_check!(softplus_matches_fd, -4.0, 4.0, |t: &Tape<f64>, x| t.softplus(x));
unary_check!(silu_matches_fd, -4.0, 4.0, |t: &Tape<f64>, x| t.silu(x));
unary_check!(add_scalar_matches_fd, -2.0, 2.0, |t: &Tape<f64>, x| t.add_scalar(x, 1.7));
unary_check!(mul_scalar_matches_fd, -2.0, 2.0, |t: &Tape<f64>, x| t.mul_scalar(x, -2.3));

#[test]
fn abs_pow_matches_fd() {
    let err = worst_err(101, |rng| {
        let n = 2 + rng.below(8);
        // Stay away from the kink at zero.
        let x = NdArray::from_vec(
            vec![n],
            (0..n)
                .map(|_| {
                    let v = rng.range(0.1, 3.0);
                    if rng.below(2) == 0 {
                        v
                    } else {
                        -v
                    }
                })
                .collect(),
        )
        .unwrap();
        let gamma = rng.range(1.2, 3.0);
        let coeffs = rand_vec(rng, n, -1.0, 1.0);
        let f: Builder = Box::new(move |tape, leaf| {
            let y = tape.abs_pow(leaf, gamma);
            readout(tape, y, &coeffs)
        });
        (x, f)
    });
    assert!(err <= TOL, "max rel err {err}");
}

#[test]
fn clamp_matches_fd() {
    let err = worst_err(102, |rng| {
        let n = 2 + rng.below(8);
        // Keep samples off the clamp boundaries so the kink is not probed.
        let x = NdArray::from_vec(
            vec![n],
            (0..n)
                .map(|_| {
                    let v = rng.range(-2.0, 2.0);
                    if (v - 0.9).abs() < 0.01 || (v + 0.7).abs() < 0.01 {
                        0.0
                    } else {
                        v
                    }
                })
                .collect(),
        )
        .unwrap();
        let coeffs = rand_vec(rng, n, -1.0, 1.0);
        let f: Builder = Box::new(move |tape, leaf| {
            let y = tape.clamp(leaf, -0.7, 0.9);
            readout(tape, y, &coeffs)
        });
        (x, f)
    });
    assert!(err <= TOL, "max rel err {err}");
}

macro_rules! binary_check {
    ($name:ident, $lo:expr, $hi:expr, $apply:expr) => {
        #[test]
        fn $name() {
            let err = worst_err(line!() as u64, |rng| {
                let n = 2 + rng.below(8);
                // Leaf packs both operands; the op reads two slices.
                let x = NdArray::from_vec(vec![2, n], rand_vec(rng, 2 * n, $lo, $hi)).unwrap();
                let coeffs = rand_vec(rng, 2 * n, -1.0, 1.0);
                let f: Builder = Box::new(move |tape, leaf| {
                    let a = tape.index0(leaf, 0)?;
                    let b = tape.index0(leaf, 1)?;
                    let y = $apply(tape, a, b)?;
                    let out_len: usize = tape.shape(y).iter().product();
                    readout(tape, y, &coeffs[..out_len])
                });
                (x, f)
            });
            assert!(err <= TOL, "max rel err {err}");
        }
    };
}

binary_check!(add_matches_fd, -2.0, 2.0, |t: &Tape<f64>, a, b| t.add(a, b));
binary_check!(sub_matches_fd, -2.0, 2.0, |t: &Tape<f64>, a, b| t.sub(a, b));
binary_check!(mul_matches_fd, -2.0, 2.0, |t: &Tape<f64>, a, b| t.mul(a, b));
binary_check!(div_matches_fd, 0.3, 3.0, |t: &Tape<f64>, a, b| t.div(a, b));
binary_check!(interleave_matches_fd, -2.0, 2.0, |t: &Tape<f64>, a, b| {
    // [1, n] pair interleaved to [2, n].
    let a2 = t.broadcast0(a, 1);
    let b2 = t.broadcast0(b, 1);
    t.interleave0(a2, b2)
});

#[test]
fn linear_map_matches_fd_for_inputs_weights_and_bias() {
    for role in 0..3 {
        let err = worst_err(200 + role, |rng| {
            let (rows, in_dim, out_dim) = (1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4));
            let x = rand_vec(rng, rows * in_dim, -2.0, 2.0);
            let w = rand_vec(rng, out_dim * in_dim, -2.0, 2.0);
            let b = rand_vec(rng, out_dim, -2.0, 2.0);
            let coeffs = rand_vec(rng, rows * out_dim, -1.0, 1.0);
            let leaf_data = match role {
                0 => NdArray::from_vec(vec![rows, in_dim], x.clone()).unwrap(),
                1 => NdArray::from_vec(vec![out_dim, in_dim], w.clone()).unwrap(),
                _ => NdArray::from_vec(vec![out_dim], b.clone()).unwrap(),
            };
            let (rows2, in2, out2) = (rows, in_dim, out_dim);
            let f: Builder = Box::new(move |tape, leaf| {
                let xs = tape.leaf(NdArray::from_vec(vec![rows2, in2], x.clone())?);
                let ws = tape.leaf(NdArray::from_vec(vec![out2, in2], w.clone())?);
                let bs = tape.leaf(NdArray::from_vec(vec![out2], b.clone())?);
                let (xn, wn, bn) = match role {
                    0 => (leaf, ws, bs),
                    1 => (xs, leaf, bs),
                    _ => (xs, ws, leaf),
                };
                let y = tape.linear(xn, wn, bn)?;
                readout(tape, y, &coeffs)
            });
            (leaf_data, f)
        });
        assert!(err <= TOL, "role {role}: max rel err {err}");
    }
}

#[test]
fn pointwise_linear_matches_fd_for_inputs_and_weights() {
    for role in 0..2 {
        let err = worst_err(210 + role, |rng| {
            let (in_ch, out_ch, h, w) =
                (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3));
            let x = rand_vec(rng, in_ch * h * w, -2.0, 2.0);
            let wt = rand_vec(rng, out_ch * in_ch, -2.0, 2.0);
            let b = rand_vec(rng, out_ch, -2.0, 2.0);
            let coeffs = rand_vec(rng, out_ch * h * w, -1.0, 1.0);
            let leaf_data = match role {
                0 => NdArray::from_vec(vec![in_ch, h, w], x.clone()).unwrap(),
                _ => NdArray::from_vec(vec![out_ch, in_ch], wt.clone()).unwrap(),
            };
            let f: Builder = Box::new(move |tape, leaf| {
                let xs = tape.leaf(NdArray::from_vec(vec![in_ch, h, w], x.clone())?);
                let ws = tape.leaf(NdArray::from_vec(vec![out_ch, in_ch], wt.clone())?);
                let bs = tape.leaf(NdArray::from_vec(vec![out_ch], b.clone())?);
                let (xn, wn) = match role {
                    0 => (leaf, ws),
                    _ => (xs, leaf),
                };
                let y = tape.pointwise_linear(xn, wn, bs)?;
                readout(tape, y, &coeffs)
            });
            (leaf_data, f)
        });
        assert!(err <= TOL, "role {role}: max rel err {err}");
    }
}

#[test]
fn conv2d_matches_fd_for_inputs_weights_and_bias() {
    for role in 0..3 {
        let err = worst_err(220 + role, |rng| {
            let (in_ch, out_ch) = (1 + rng.below(2), 1 + rng.below(2));
            let (h, w) = (2 + rng.below(3), 2 + rng.below(3));
            let stride = 1 + rng.below(2);
            let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
            let x = rand_vec(rng, in_ch * h * w, -2.0, 2.0);
            let wt = rand_vec(rng, out_ch * in_ch * 9, -1.0, 1.0);
            let b = rand_vec(rng, out_ch, -1.0, 1.0);
            let coeffs = rand_vec(rng, out_ch * oh * ow, -1.0, 1.0);
            let leaf_data = match role {
                0 => NdArray::from_vec(vec![in_ch, h, w], x.clone()).unwrap(),
                1 => NdArray::from_vec(vec![out_ch, in_ch, 3, 3], wt.clone()).unwrap(),
                _ => NdArray::from_vec(vec![out_ch], b.clone()).unwrap(),
            };
            let f: Builder = Box::new(move |tape, leaf| {
                let xs = tape.leaf(NdArray::from_vec(vec![in_ch, h, w], x.clone())?);
                let ws = tape.leaf(NdArray::from_vec(vec![out_ch, in_ch, 3, 3], wt.clone())?);
                let bs = tape.leaf(NdArray::from_vec(vec![out_ch], b.clone())?);
                let (xn, wn, bn) = match role {
                    0 => (leaf, ws, bs),
                    1 => (xs, leaf, bs),
                    _ => (xs, ws, leaf),
                };
                let y = tape.conv2d(xn, wn, bn, stride)?;
                readout(tape, y, &coeffs)
            });
            (leaf_data, f)
        });
        assert!(err <= TOL, "role {role}: max rel err {err}");
    }
}

#[test]
fn resample_matches_fd() {
    let err = worst_err(230, |rng| {
        let (c, h, w) = (1 + rng.below(2), 2 + rng.below(3), 2 + rng.below(3));
        let (oh, ow) = (1 + rng.below(6), 1 + rng.below(6));
        let x = NdArray::from_vec(vec![c, h, w], rand_vec(rng, c * h * w, -2.0, 2.0)).unwrap();
        let coeffs = rand_vec(rng, c * oh * ow, -1.0, 1.0);
        let f: Builder = Box::new(move |tape, leaf| {
            let y = tape.resample_bilinear(leaf, oh, ow)?;
            readout(tape, y, &coeffs)
        });
        (x, f)
    });
    assert!(err <= TOL, "max rel err {err}");
}

macro_rules! channel_check {
    ($name:ident, $lo:expr, $hi:expr, $apply:expr) => {
        #[test]
        fn $name() {
            let err = worst_err(line!() as u64 + 300, |rng| {
                let (n, m) = (2 + rng.below(6), 1 + rng.below(4));
                let x = NdArray::from_vec(vec![n, m], rand_vec(rng, n * m, $lo, $hi)).unwrap();
                let coeffs = rand_vec(rng, 2 * (n + 1) * m, -1.0, 1.0);
                let f: Builder = Box::new(move |tape, leaf| {
                    let y = $apply(tape, leaf)?;
                    let out_len: usize = tape.shape(y).iter().product();
                    readout(tape, y, &coeffs[..out_len])
                });
                (x, f)
            });
            assert!(err <= TOL, "max rel err {err}");
        }
    };
}

channel_check!(channel_softmax_matches_fd, -3.0, 3.0, |t: &Tape<f64>, x| t.channel_softmax(x));
channel_check!(channel_log_softmax_matches_fd, -3.0, 3.0, |t: &Tape<f64>, x| {
    t.channel_log_softmax(x)
});
channel_check!(channel_cumsum_matches_fd, -2.0, 2.0, |t: &Tape<f64>, x| t.channel_cumsum(x));
channel_check!(channel_sum_matches_fd, -2.0, 2.0, |t: &Tape<f64>, x| t.channel_sum(x));
channel_check!(index0_matches_fd, -2.0, 2.0, |t: &Tape<f64>, x| t.index0(x, 1));
channel_check!(slice0_matches_fd, -2.0, 2.0, |t: &Tape<f64>, x| t.slice0(x, 1, 1));
channel_check!(concat_matches_fd, -2.0, 2.0, |t: &Tape<f64>, x| {
    let a = t.slice0(x, 0, 1)?;
    t.concat0(a, x)
});

#[test]
fn broadcast_and_sum_all_match_fd() {
    let err = worst_err(400, |rng| {
        let n = 2 + rng.below(6);
        let k = 1 + rng.below(4);
        let x = NdArray::from_vec(vec![n], rand_vec(rng, n, -2.0, 2.0)).unwrap();
        let coeffs = rand_vec(rng, k * n, -1.0, 1.0);
        let f: Builder = Box::new(move |tape, leaf| {
            let y = tape.broadcast0(leaf, k);
            readout(tape, y, &coeffs)
        });
        (x, f)
    });
    assert!(err <= TOL, "max rel err {err}");
}

#[test]
fn spatial_mean_and_pick_match_fd() {
    let err = worst_err(410, |rng| {
        let (c, h, w) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3));
        let x = NdArray::from_vec(vec![c, h, w], rand_vec(rng, c * h * w, -2.0, 2.0)).unwrap();
        let coeffs = rand_vec(rng, c, -1.0, 1.0);
        let f: Builder = Box::new(move |tape, leaf| {
            let pooled = tape.spatial_mean(leaf)?;
            let weighted = readout(tape, pooled, &coeffs)?;
            Ok(weighted)
        });
        (x, f)
    });
    assert!(err <= TOL, "max rel err {err}");

    let err = worst_err(411, |rng| {
        let n = 2 + rng.below(6);
        let idx = rng.below(n);
        let x = NdArray::from_vec(vec![n], rand_vec(rng, n, -2.0, 2.0)).unwrap();
        let f: Builder = Box::new(move |tape, leaf| {
            let p = tape.pick(leaf, idx)?;
            Ok(tape.mul_scalar(p, 1.7))
        });
        (x, f)
    });
    assert!(err <= TOL, "max rel err {err}");
}

#[test]
fn scalar_mul_matches_fd_for_both_operands() {
    let err = worst_err(420, |rng| {
        let n = 2 + rng.below(6);
        // Leaf packs the scalar in slot 0 and the array afterwards.
        let x = NdArray::from_vec(vec![n + 1], rand_vec(rng, n + 1, -2.0, 2.0)).unwrap();
        let coeffs = rand_vec(rng, n, -1.0, 1.0);
        let f: Builder = Box::new(move |tape, leaf| {
            let s = tape.pick(leaf, 0)?;
            let a = tape.slice0(leaf, 1, n)?;
            let y = tape.scalar_mul(a, s)?;
            readout(tape, y, &coeffs)
        });
        (x, f)
    });
    assert!(err <= TOL, "max rel err {err}");
}

#[test]
fn binomial_logits_match_fd() {
    let err = worst_err(430, |rng| {
        let n_total = 3 + rng.below(62);
        let (h, w) = (1 + rng.below(2), 1 + rng.below(3));
        let x =
            NdArray::from_vec(vec![h, w], rand_vec(rng, h * w, 0.1, 0.9)).unwrap();
        let coeffs = rand_vec(rng, n_total * h * w, -1.0, 1.0);
        let f: Builder = Box::new(move |tape, leaf| {
            let y = tape.binomial_logits(leaf, log_choose_table(n_total))?;
            readout(tape, y, &coeffs)
        });
        (x, f)
    });
    assert!(err <= TOL, "max rel err {err}");
}

/// A two-layer perceptron with a scalar loss, checked against finite
/// differences through all parameters at once (packed into the probe leaf).
#[test]
fn composite_mlp_loss_matches_fd() {
    let err = worst_err(500, |rng| {
        let (in_dim, hidden, out_dim) = (3, 4, 2);
        let n_w1 = hidden * in_dim;
        let n_w2 = out_dim * hidden;
        let total = n_w1 + hidden + n_w2 + out_dim;
        let params = NdArray::from_vec(vec![total], rand_vec(rng, total, -1.0, 1.0)).unwrap();
        let input = rand_vec(rng, in_dim, -1.0, 1.0);
        let target = rand_vec(rng, out_dim, -1.0, 1.0);
        let f: Builder = Box::new(move |tape, leaf| {
            let w1 = tape.slice0(leaf, 0, n_w1)?;
            let b1 = tape.slice0(leaf, n_w1, hidden)?;
            let w2 = tape.slice0(leaf, n_w1 + hidden, n_w2)?;
            let b2 = tape.slice0(leaf, n_w1 + hidden + n_w2, out_dim)?;
            // 1-D parameter slices cannot be reshaped on the tape; emulate
            // the affine maps with picks (tiny dims keep this cheap).
            let x = tape.leaf(NdArray::from_vec(vec![in_dim], input.clone())?);
            let mut hidden_vals = Vec::new();
            for o in 0..hidden {
                let mut acc = tape.pick(b1, o)?;
                for i in 0..in_dim {
                    let wij = tape.pick(w1, o * in_dim + i)?;
                    let xi = tape.pick(x, i)?;
                    acc = tape.add(acc, tape.mul(wij, xi)?)?;
                }
                hidden_vals.push(tape.silu(acc));
            }
            let mut loss: Option<NodeId> = None;
            for o in 0..out_dim {
                let mut acc = tape.pick(b2, o)?;
                for (i, hv) in hidden_vals.iter().enumerate() {
                    let wij = tape.pick(w2, o * hidden + i)?;
                    acc = tape.add(acc, tape.mul(wij, *hv)?)?;
                }
                let diff = tape.add_scalar(acc, -target[o]);
                let sq = tape.mul(diff, diff)?;
                loss = Some(match loss {
                    None => sq,
                    Some(l) => tape.add(l, sq)?,
                });
            }
            Ok(loss.expect("out_dim > 0"))
        });
        (params, f)
    });
    assert!(err <= TOL, "max rel err {err}");
}

/// The trailing-axis affine map against a naive triple-loop oracle.
#[test]
fn linear_matches_naive_matmul_oracle() {
    let mut rng = Rng::new(600);
    for _ in 0..100 {
        let (rows, in_dim, out_dim) = (1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(5));
        let x = rand_vec(&mut rng, rows * in_dim, -2.0, 2.0);
        let w = rand_vec(&mut rng, out_dim * in_dim, -2.0, 2.0);
        let b = rand_vec(&mut rng, out_dim, -2.0, 2.0);
        let tape: Tape<f64> = Tape::new();
        let xn = tape.leaf(NdArray::from_vec(vec![rows, in_dim], x.clone()).unwrap());
        let wn = tape.leaf(NdArray::from_vec(vec![out_dim, in_dim], w.clone()).unwrap());
        let bn = tape.leaf(NdArray::from_vec(vec![out_dim], b.clone()).unwrap());
        let y = tape.linear(xn, wn, bn).unwrap();
        let got = tape.value_clone(y);
        for r in 0..rows {
            for o in 0..out_dim {
                let mut want = b[o];
                for i in 0..in_dim {
                    want += x[r * in_dim + i] * w[o * in_dim + i];
                }
                assert!(
                    (got.data()[r * out_dim + o] - want).abs() <= 1e-6,
                    "row {r} out {o}"
                );
            }
        }
    }
}

//! Finite-difference verification harness behind the `grad-check` command:
//! random configurations of the differentiable building blocks, each checked
//! against central differences in 64-bit mode.

use crate::array::NdArray;
use crate::assembly::{metric_head_forward, HeadKind, MetricHead, ProbHeadKind};
use crate::backbone::PyramidNodes;
use crate::bins::{attract_graph, AttractorConfig, AttractorVariant};
use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::losses::{silog, ssi_loss, LossConfig};
use crate::nn::{Binder, ParamSet};
use crate::prob::{log_binomial_graph, temperature_normalize_graph, Q_CLAMP, T_FLOOR};
use crate::rng::Rng;
use crate::tape::Tape;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub configs: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

const FD_EPS: f64 = 1e-5;

/// Random attractor adjustment: the input leaf packs centers and attractors
/// along axis 0 so the check covers gradients with respect to both.
pub fn check_attractor(variant: AttractorVariant, configs: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = Rng::split(seed, variant as u64);
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let n_c = 2 + rng.below(5);
        let n_a = 1 + rng.below(3);
        let alpha = rng.range(0.5, 50.0);
        let gamma = rng.range(1.2, 3.0);
        // Keep center/attractor gaps away from the |x|^gamma kink at zero.
        let (centers, attractors) = loop {
            let c: Vec<f64> = (0..n_c).map(|_| rng.range(1.0, 9.0)).collect();
            let a: Vec<f64> = (0..n_a).map(|_| rng.range(1.0, 9.0)).collect();
            let ok = c
                .iter()
                .all(|ci| a.iter().all(|ai| (ai - ci).abs() > 0.05));
            if ok {
                break (c, a);
            }
        };
        let mut packed = centers.clone();
        packed.extend_from_slice(&attractors);
        let x = NdArray::from_vec(vec![n_c + n_a, 1, 1], packed)?;
        let err = grad_check(
            |tape, leaf| {
                let c = tape.slice0(leaf, 0, n_c)?;
                let a = tape.slice0(leaf, n_c, n_a)?;
                let adjusted = attract_graph(tape, c, a, variant, alpha, gamma, 0.01, 100.0)?;
                // Random fixed readout to make the root scalar.
                Ok(tape.sum_all(adjusted))
            },
            &x,
            FD_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckReport {
        name: format!("attract_{}", variant.name()),
        configs,
        max_rel_err: worst,
    })
}

/// Raw 2-channel field -> (q, t) squash -> binomial log-masses ->
/// temperature softmax -> random linear readout.
pub fn check_binomial_path(configs: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = Rng::split(seed, 11);
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let n_total = 4 + rng.below(61);
        let (h, w) = (1 + rng.below(3), 1 + rng.below(3));
        let x = NdArray::from_vec(
            vec![2, h, w],
            (0..2 * h * w).map(|_| rng.range(-2.0, 2.0)).collect(),
        )?;
        let readout: Vec<f64> = (0..n_total * h * w).map(|_| rng.range(-1.0, 1.0)).collect();
        let err = grad_check(
            |tape, leaf| {
                let q_raw = tape.index0(leaf, 0)?;
                let q = tape.clamp(tape.sigmoid(q_raw), Q_CLAMP, 1.0 - Q_CLAMP);
                let t_raw = tape.index0(leaf, 1)?;
                let t = tape.add_scalar(tape.softplus(t_raw), T_FLOOR);
                let log_p = log_binomial_graph(tape, q, n_total)?;
                let probs = temperature_normalize_graph(tape, log_p, t)?;
                let coeff = tape.leaf(NdArray::from_vec(
                    vec![n_total, h, w],
                    readout.clone(),
                )?);
                let weighted = tape.mul(probs, coeff)?;
                Ok(tape.sum_all(weighted))
            },
            &x,
            FD_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckReport { name: "log_binomial_temperature".into(), configs, max_rel_err: worst })
}

pub fn check_silog(configs: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = Rng::split(seed, 21);
    let cfg = LossConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let n = 4 + rng.below(20);
        let gt = NdArray::from_vec(vec![1, n], (0..n).map(|_| rng.range(0.5, 10.0)).collect())?;
        let valid: Vec<bool> = {
            let mut v: Vec<bool> = (0..n).map(|_| rng.uniform() > 0.3).collect();
            v[0] = true;
            v
        };
        let pred =
            NdArray::from_vec(vec![1, n], (0..n).map(|_| rng.range(0.5, 10.0)).collect())?;
        let err = grad_check(
            |tape, leaf| silog(tape, leaf, &gt, &valid, &cfg),
            &pred,
            FD_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckReport { name: "silog".into(), configs, max_rel_err: worst })
}

pub fn check_ssi(configs: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = Rng::split(seed, 31);
    let cfg = LossConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let n = 6 + rng.below(20);
        let gt = NdArray::from_vec(vec![1, n], (0..n).map(|_| rng.range(0.5, 10.0)).collect())?;
        let mut valid: Vec<bool> = (0..n).map(|_| rng.uniform() > 0.3).collect();
        valid[0] = true;
        valid[1] = true;
        let pred =
            NdArray::from_vec(vec![1, n], (0..n).map(|_| rng.range(-1.0, 1.0)).collect())?;
        let err = grad_check(
            |tape, leaf| ssi_loss(tape, leaf, &gt, &valid, &cfg),
            &pred,
            FD_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckReport { name: "ssi_loss".into(), configs, max_rel_err: worst })
}

/// Full metric head on a synthetic pyramid: the gradient of the mean output
/// with respect to every head parameter is checked coordinate by coordinate.
pub fn check_metric_head(configs: usize, seed: u64) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    for c in 0..configs {
        let mut rng = Rng::split(seed, 1000 + c as u64);
        let variant = if rng.below(2) == 0 {
            AttractorVariant::Inverse
        } else {
            AttractorVariant::Exponential
        };
        let attractor_cfg = AttractorConfig {
            alpha: rng.range(1.0, 40.0),
            gamma: rng.range(1.5, 2.5),
            variant,
            counts: [2, 2, 1, 1],
        };
        let level_ch = [4usize, 4, 4, 4];
        let head = MetricHead::<f64>::init(
            "check",
            (0.5, 10.0),
            HeadKind::Attractor,
            ProbHeadKind::Binomial,
            5,
            attractor_cfg,
            4,
            &level_ch,
            &mut rng,
        )?;

        // Synthetic pyramid for a 16x16 input: bottleneck plus four levels.
        let mut field = |ch: usize, hw: usize| -> Result<NdArray<f64>> {
            NdArray::from_vec(
                vec![ch, hw, hw],
                (0..ch * hw * hw).map(|_| rng.range(-1.0, 1.0)).collect(),
            )
        };
        let bottleneck = field(4, 1)?;
        let levels = [field(4, 1)?, field(4, 2)?, field(4, 4)?, field(4, 8)?];
        let rel = field(1, 16)?;

        let eval = |head: &MetricHead<f64>| -> Result<(f64, Vec<(String, NdArray<f64>)>)> {
            let tape: Tape<f64> = Tape::new();
            let mut binder = Binder::new(&tape);
            let bound = head.bind(&mut binder);
            let pyramid = PyramidNodes {
                bottleneck: tape.leaf(bottleneck.clone()),
                levels: [
                    tape.leaf(levels[0].clone()),
                    tape.leaf(levels[1].clone()),
                    tape.leaf(levels[2].clone()),
                    tape.leaf(levels[3].clone()),
                ],
            };
            let rel_node = tape.index0(tape.leaf(rel.clone()), 0)?;
            let depth = metric_head_forward(&tape, &pyramid, rel_node, head, &bound)?;
            let root = tape.mean_all(depth);
            let value = tape.value(root).item();
            tape.backward(root)?;
            Ok((value, binder.gradients()))
        };

        let (_, grads) = eval(&head)?;
        // Probe a deterministic subset of coordinates per parameter array to
        // keep the whole harness inside the runtime budget.
        for (name, grad) in &grads {
            let count = grad.len();
            let probes = count.min(6);
            for p in 0..probes {
                let idx = if probes == count { p } else { rng.below(count) };
                let perturbed = |delta: f64| -> Result<f64> {
                    let mut h = head.clone();
                    h.visit_mut(&mut |n, arr| {
                        if n == name {
                            arr.data_mut()[idx] += delta;
                        }
                    });
                    Ok(eval(&h)?.0)
                };
                let fp = perturbed(FD_EPS)?;
                let fm = perturbed(-FD_EPS)?;
                let numeric = (fp - fm) / (2.0 * FD_EPS);
                let err = (grad.data()[idx] - numeric).abs() / numeric.abs().max(1.0);
                worst = worst.max(err);
            }
        }
    }
    Ok(CheckReport { name: "metric_head_forward".into(), configs, max_rel_err: worst })
}

/// The standard six-way verification battery.
pub fn run_standard_checks(configs: usize, seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_attractor(AttractorVariant::Inverse, configs, seed)?,
        check_attractor(AttractorVariant::Exponential, configs, seed)?,
        check_binomial_path(configs, seed)?,
        check_silog(configs, seed)?,
        check_ssi(configs, seed)?,
        check_metric_head(configs, seed)?,
    ])
}

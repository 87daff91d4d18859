//! Probability over bin centers.
//!
//! The ordinal head predicts a per-pixel mode q and temperature t, evaluates
//! binomial log-masses over the ordered bins (Stirling-approximated log
//! factorials with exact small values and endpoints), and normalizes with
//! softmax(log p / t). A plain per-pixel softmax over MLP logits serves as
//! the unordered baseline.

use crate::error::{Error, Result};
use crate::nn::{pointwise_mlp, BoundMlp};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

/// q is clamped to [Q_CLAMP, 1 - Q_CLAMP] so logs stay finite.
pub const Q_CLAMP: f64 = 1e-4;
/// Temperature floor; keeps logits bounded at low temperature.
pub const T_FLOOR: f64 = 0.05;

/// Largest m whose ln(m!) is summed exactly; the asymptotic series with the
/// first correction term is not accurate to 1e-4 below m = 4.
const STIRLING_EXACT_MAX: usize = 8;

/// ln(m!) via the Stirling series with the 1/(12m) correction; small m exact.
pub fn ln_factorial(m: usize) -> f64 {
    if m <= STIRLING_EXACT_MAX {
        (2..=m).map(|i| (i as f64).ln()).sum()
    } else {
        let mf = m as f64;
        (mf + 0.5) * mf.ln() - mf + 0.5 * (2.0 * std::f64::consts::PI).ln() + 1.0 / (12.0 * mf)
    }
}

/// ln C(n, k); the endpoints are exactly zero.
pub fn ln_choose(n: usize, k: usize) -> f64 {
    debug_assert!(k <= n);
    if k == 0 || k == n {
        0.0
    } else {
        ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
    }
}

/// Binomial log-coefficient table for `n_total` bins (n = n_total - 1).
pub fn log_choose_table(n_total: usize) -> Vec<f64> {
    let n = n_total - 1;
    (0..n_total).map(|k| ln_choose(n, k)).collect()
}

/// Per-pixel binomial log-masses over `n_total` ordered bins:
/// log p_k = ln C(n,k) + k ln q + (n-k) ln(1-q), q of shape [h, w] in (0,1).
pub fn log_binomial_graph<S: Scalar>(
    tape: &Tape<S>,
    q: NodeId,
    n_total: usize,
) -> Result<NodeId> {
    if n_total < 2 {
        return Err(Error::Contract(format!("log_binomial: needs n_total >= 2, got {n_total}")));
    }
    tape.binomial_logits(q, log_choose_table(n_total))
}

/// softmax over bins of log p / t; t of shape [h, w], strictly positive.
pub fn temperature_normalize_graph<S: Scalar>(
    tape: &Tape<S>,
    log_p: NodeId,
    t: NodeId,
) -> Result<NodeId> {
    if tape.value(t).data().iter().any(|v| v.to_f64() <= 0.0) {
        return Err(Error::Contract("temperature_normalize: t must be positive".into()));
    }
    let n = tape.shape(log_p)[0];
    let scaled = tape.div(log_p, tape.broadcast0(t, n))?;
    tape.channel_softmax(scaled)
}

/// Mode/temperature prediction from decoder features conditioned on the
/// relative depth (resampled to the feature grid and stacked as an extra
/// channel). Zero MLP output gives q = 0.5 and t = softplus(0) + T_FLOOR.
pub fn predict_qt_graph<S: Scalar>(
    tape: &Tape<S>,
    features: NodeId,
    rel_full: NodeId,
    mlp: BoundMlp,
) -> Result<(NodeId, NodeId)> {
    let shape = tape.shape(features);
    if shape.len() != 3 {
        return Err(Error::Dimension(format!("predict_qt: features must be [C,h,w], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let rel_half = tape.resample_bilinear(rel_full, h, w)?;
    let rel_ch = tape.broadcast0(rel_half, 1);
    let stacked = tape.concat0(features, rel_ch)?;
    let out = pointwise_mlp(tape, stacked, mlp)?;
    if tape.shape(out)[0] != 2 {
        return Err(Error::Dimension("predict_qt: head must emit 2 channels".into()));
    }
    let q_raw = tape.index0(out, 0)?;
    let q = tape.clamp(tape.sigmoid(q_raw), Q_CLAMP, 1.0 - Q_CLAMP);
    let t_raw = tape.index0(out, 1)?;
    let t = tape.add_scalar(tape.softplus(t_raw), S::from_f64(T_FLOOR));
    Ok((q, t))
}

/// Full ordinal path: features + relative depth -> normalized probabilities.
pub fn binomial_head_graph<S: Scalar>(
    tape: &Tape<S>,
    features: NodeId,
    rel_full: NodeId,
    mlp: BoundMlp,
    n_total: usize,
) -> Result<NodeId> {
    let (q, t) = predict_qt_graph(tape, features, rel_full, mlp)?;
    let log_p = log_binomial_graph(tape, q, n_total)?;
    temperature_normalize_graph(tape, log_p, t)
}

/// Unordered baseline: per-pixel softmax over MLP logits.
pub fn softmax_head_graph<S: Scalar>(
    tape: &Tape<S>,
    features: NodeId,
    mlp: BoundMlp,
) -> Result<NodeId> {
    let logits = pointwise_mlp(tape, features, mlp)?;
    tape.channel_softmax(logits)
}

/// No strict local minimum between two strict local maxima: the sequence
/// never strictly falls and later strictly rises.
pub fn is_unimodal(seq: &[f64]) -> bool {
    let mut fell = false;
    for pair in seq.windows(2) {
        if pair[1] > pair[0] {
            if fell {
                return false;
            }
        } else if pair[1] < pair[0] {
            fell = true;
        }
    }
    true
}
